import { LayerView } from './state'

/**
 * The subset of CanvasRenderingContext2D the scene needs. Narrow on purpose:
 * tests drive it with a recording stub.
 */
export interface SceneContext {
  canvas: { width: number; height: number }
  globalAlpha: number
  setTransform(a: number, b: number, c: number, d: number, e: number, f: number): void
  clearRect(x: number, y: number, w: number, h: number): void
  drawImage(image: CanvasImageSource, dx: number, dy: number): void
}

export interface SceneImages {
  composite: CanvasImageSource | null
  layers: (CanvasImageSource | null)[]
}

/**
 * Draw the current reconstruction, then any visible layer on top with its
 * own opacity. The composite always renders at full alpha; layer overlays
 * are inspection aids, not part of the reconstruction.
 */
export function drawScene(
  ctx: SceneContext,
  images: SceneImages,
  views: LayerView[],
  zoom: number,
  panX: number,
  panY: number,
): void {
  ctx.setTransform(1, 0, 0, 1, 0, 0)
  ctx.globalAlpha = 1
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height)
  ctx.setTransform(zoom, 0, 0, zoom, panX, panY)
  if (images.composite) {
    ctx.drawImage(images.composite, 0, 0)
  }
  views.forEach((view, i) => {
    const layer = images.layers[i]
    if (!view.visible || !layer) return
    ctx.globalAlpha = view.opacity
    ctx.drawImage(layer, 0, 0)
  })
  ctx.globalAlpha = 1
}
