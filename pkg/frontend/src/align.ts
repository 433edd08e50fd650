/** Pointer and keyboard geometry for the alignment canvas. */

export interface KeyNudge {
  dxSteps: number
  dySteps: number
  fine: boolean
}

const ARROWS: Record<string, [number, number]> = {
  ArrowLeft: [-1, 0],
  ArrowRight: [1, 0],
  ArrowUp: [0, -1],
  ArrowDown: [0, 1],
}

export function keyToNudge(key: string, shiftKey: boolean): KeyNudge | null {
  const arrow = ARROWS[key]
  if (!arrow) return null
  return { dxSteps: arrow[0], dySteps: arrow[1], fine: shiftKey }
}

/** Convert a pointer movement in CSS pixels to image pixels under zoom. */
export function dragToImageDelta(
  dxScreen: number,
  dyScreen: number,
  zoom: number,
): { dxPx: number; dyPx: number } {
  return { dxPx: dxScreen / zoom, dyPx: dyScreen / zoom }
}

/** Wheel zoom centered on the cursor; returns the replacement view. */
export function zoomAt(
  zoom: number,
  panX: number,
  panY: number,
  cursorX: number,
  cursorY: number,
  wheelDelta: number,
): { zoom: number; panX: number; panY: number } {
  const factor = Math.exp(-wheelDelta * 0.001)
  const next = Math.min(16, Math.max(0.25, zoom * factor))
  // keep the image point under the cursor fixed
  const scale = next / zoom
  return {
    zoom: next,
    panX: cursorX - (cursorX - panX) * scale,
    panY: cursorY - (cursorY - panY) * scale,
  }
}
