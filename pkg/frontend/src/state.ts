import { Bone, BONE_LAYER, CaseSummary, ShiftRecord } from './types'

/** Arrow keys move the selected bone by a whole pixel, shift+arrow by a quarter. */
export const NUDGE_PX = 1
export const FINE_NUDGE_PX = 0.25

export interface WorkingShift {
  thetaDeg: number
  dxPx: number
  dyPx: number
}

export interface LayerView {
  visible: boolean
  opacity: number
}

export interface SessionState {
  caseId: string | null
  pixelSpacingMm: number
  shifts: Record<Bone, WorkingShift>
  /**
   * Width readout. Always the service's derived value: null until the first
   * preview (or stored baseline) arrives, never computed here.
   */
  jswMm: number | null
  baselineJswMm: number | null
  dirty: boolean
  selectedBone: Bone
  /** Per layer index (0 soft tissue, 1 lower bone, 2 upper bone). */
  layerViews: LayerView[]
  zoom: number
  panX: number
  panY: number
  commitError: { field: string; message: string } | null
}

const zeroShift = (): WorkingShift => ({ thetaDeg: 0, dxPx: 0, dyPx: 0 })

export function initialState(): SessionState {
  return {
    caseId: null,
    pixelSpacingMm: 0,
    shifts: { lower: zeroShift(), upper: zeroShift() },
    jswMm: null,
    baselineJswMm: null,
    dirty: false,
    selectedBone: 'upper',
    layerViews: [
      { visible: false, opacity: 1.0 },
      { visible: false, opacity: 0.5 },
      { visible: false, opacity: 0.5 },
    ],
    zoom: 1,
    panX: 0,
    panY: 0,
    commitError: null,
  }
}

export function isIdentity(shift: WorkingShift): boolean {
  return shift.thetaDeg === 0 && shift.dxPx === 0 && shift.dyPx === 0
}

export function shiftRecords(state: SessionState): ShiftRecord[] {
  const bones: Bone[] = ['lower', 'upper']
  return bones
    .filter((bone) => !isIdentity(state.shifts[bone]))
    .map((bone) => ({
      layer: BONE_LAYER[bone],
      theta_deg: state.shifts[bone].thetaDeg,
      dx_px: state.shifts[bone].dxPx,
      dy_px: state.shifts[bone].dyPx,
    }))
}

type Listener = (state: SessionState) => void

/**
 * Mutable session store. Mutations go through methods so the dirty flag and
 * readout invalidation cannot be forgotten; listeners fire after every change.
 */
export class SessionStore {
  state: SessionState = initialState()
  private listeners: Listener[] = []

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener)
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener)
    }
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state)
  }

  openCase(summary: CaseSummary): void {
    this.state = {
      ...initialState(),
      caseId: summary.id,
      pixelSpacingMm: summary.pixel_spacing_mm,
      jswMm: summary.jsw_mm,
      baselineJswMm: summary.jsw_mm,
    }
    this.emit()
  }

  /** Restore a stored annotation's shifts; the session starts clean. */
  restoreShifts(records: ShiftRecord[]): void {
    for (const rec of records) {
      const bone: Bone | null =
        rec.layer === BONE_LAYER.lower ? 'lower' : rec.layer === BONE_LAYER.upper ? 'upper' : null
      if (bone === null) continue
      this.state.shifts[bone] = {
        thetaDeg: rec.theta_deg,
        dxPx: rec.dx_px,
        dyPx: rec.dy_px,
      }
    }
    this.state.dirty = false
    this.emit()
  }

  selectBone(bone: Bone): void {
    this.state.selectedBone = bone
    this.emit()
  }

  moveBone(bone: Bone, dxPx: number, dyPx: number): void {
    if (dxPx === 0 && dyPx === 0) return
    const shift = this.state.shifts[bone]
    this.state.shifts[bone] = {
      ...shift,
      dxPx: shift.dxPx + dxPx,
      dyPx: shift.dyPx + dyPx,
    }
    this.state.dirty = true
    this.state.commitError = null
    this.emit()
  }

  nudgeSelected(dxSteps: number, dySteps: number, fine: boolean): void {
    const step = fine ? FINE_NUDGE_PX : NUDGE_PX
    this.moveBone(this.state.selectedBone, dxSteps * step, dySteps * step)
  }

  /** Install the service's derived readout for the current working shifts. */
  applyPreview(jswMm: number, baselineJswMm: number): void {
    this.state.jswMm = jswMm
    this.state.baselineJswMm = baselineJswMm
    this.emit()
  }

  setLayerVisible(index: number, visible: boolean): void {
    this.state.layerViews[index].visible = visible
    this.emit()
  }

  setLayerOpacity(index: number, opacity: number): void {
    this.state.layerViews[index].opacity = Math.min(1, Math.max(0, opacity))
    this.emit()
  }

  setView(zoom: number, panX: number, panY: number): void {
    this.state.zoom = Math.min(16, Math.max(0.25, zoom))
    this.state.panX = panX
    this.state.panY = panY
    this.emit()
  }

  commitFailed(field: string, message: string): void {
    this.state.commitError = { field, message }
    this.emit()
  }

  committed(): void {
    this.state.dirty = false
    this.state.commitError = null
    this.emit()
  }
}

export function canCommit(state: SessionState): boolean {
  return state.caseId !== null && state.dirty
}

/** True when leaving the current case should warn about unsaved alignment. */
export function shouldWarnOnLeave(state: SessionState): boolean {
  return state.dirty
}
