import { describe, expect, it } from 'vitest'

import {
  canCommit,
  initialState,
  isIdentity,
  SessionStore,
  shiftRecords,
  shouldWarnOnLeave,
} from '../src/state'
import { CaseSummary } from '../src/types'

const summary: CaseSummary = {
  id: 'case000',
  kind: 'phantom',
  split: 'test',
  pixel_spacing_mm: 0.175,
  jsw_mm: 2.5,
  has_layers: true,
  annotated: false,
}

function openStore(): SessionStore {
  const store = new SessionStore()
  store.openCase(summary)
  return store
}

describe('SessionStore', () => {
  it('opens a case clean, with the readout seeded from the listing', () => {
    const store = openStore()
    expect(store.state.caseId).toBe('case000')
    expect(store.state.dirty).toBe(false)
    expect(store.state.jswMm).toBe(2.5)
    expect(store.state.baselineJswMm).toBe(2.5)
    expect(store.state.pixelSpacingMm).toBe(0.175)
  })

  it('accumulates drags on the chosen bone and marks the session dirty', () => {
    const store = openStore()
    store.moveBone('upper', 1, -2)
    store.moveBone('upper', 0.5, -0.5)
    expect(store.state.shifts.upper).toEqual({ thetaDeg: 0, dxPx: 1.5, dyPx: -2.5 })
    expect(store.state.shifts.lower).toEqual({ thetaDeg: 0, dxPx: 0, dyPx: 0 })
    expect(store.state.dirty).toBe(true)
  })

  it('ignores a zero-length drag', () => {
    const store = openStore()
    store.moveBone('upper', 0, 0)
    expect(store.state.dirty).toBe(false)
  })

  it('nudges the selected bone a pixel per arrow, a quarter when fine', () => {
    const store = openStore()
    store.nudgeSelected(0, -1, false)
    expect(store.state.shifts.upper.dyPx).toBe(-1)
    store.nudgeSelected(1, 0, true)
    expect(store.state.shifts.upper.dxPx).toBe(0.25)
    store.selectBone('lower')
    store.nudgeSelected(0, 1, true)
    expect(store.state.shifts.lower.dyPx).toBe(0.25)
  })

  it('serializes only non-identity bones, mapped to their stack layers', () => {
    const store = openStore()
    expect(shiftRecords(store.state)).toEqual([])
    store.moveBone('upper', 0, -5)
    expect(shiftRecords(store.state)).toEqual([
      { layer: 2, theta_deg: 0, dx_px: 0, dy_px: -5 },
    ])
    store.moveBone('lower', 1, 0)
    expect(shiftRecords(store.state)).toEqual([
      { layer: 1, theta_deg: 0, dx_px: 1, dy_px: 0 },
      { layer: 2, theta_deg: 0, dx_px: 0, dy_px: -5 },
    ])
  })

  it('restores stored shifts without dirtying the session', () => {
    const store = openStore()
    store.restoreShifts([
      { layer: 2, theta_deg: 0, dx_px: 0.5, dy_px: -3 },
      { layer: 1, theta_deg: 0, dx_px: -1, dy_px: 0.25 },
    ])
    expect(store.state.shifts.upper).toEqual({ thetaDeg: 0, dxPx: 0.5, dyPx: -3 })
    expect(store.state.shifts.lower).toEqual({ thetaDeg: 0, dxPx: -1, dyPx: 0.25 })
    expect(store.state.dirty).toBe(false)
    // and the wire form round-trips
    expect(shiftRecords(store.state)).toEqual([
      { layer: 1, theta_deg: 0, dx_px: -1, dy_px: 0.25 },
      { layer: 2, theta_deg: 0, dx_px: 0.5, dy_px: -3 },
    ])
  })

  it('takes the readout from the service verbatim', () => {
    const store = openStore()
    store.applyPreview(3.375, 2.5)
    expect(store.state.jswMm).toBe(3.375)
    expect(store.state.baselineJswMm).toBe(2.5)
  })

  it('clears the inline commit error on the next adjustment', () => {
    const store = openStore()
    store.moveBone('upper', 0, -1)
    store.commitFailed('annotator_id', 'must be a non-empty string')
    expect(store.state.commitError).toEqual({
      field: 'annotator_id',
      message: 'must be a non-empty string',
    })
    store.moveBone('upper', 0, -1)
    expect(store.state.commitError).toBeNull()
    expect(store.state.dirty).toBe(true)
  })

  it('marks the session clean after a commit', () => {
    const store = openStore()
    store.moveBone('lower', 2, 0)
    store.committed()
    expect(store.state.dirty).toBe(false)
    expect(store.state.commitError).toBeNull()
  })

  it('clamps layer opacity and zoom to their ranges', () => {
    const store = openStore()
    store.setLayerOpacity(0, 1.4)
    expect(store.state.layerViews[0].opacity).toBe(1)
    store.setLayerOpacity(0, -0.2)
    expect(store.state.layerViews[0].opacity).toBe(0)
    store.setView(100, 3, 4)
    expect(store.state.zoom).toBe(16)
    store.setView(0.01, 3, 4)
    expect(store.state.zoom).toBe(0.25)
    expect(store.state.panX).toBe(3)
    expect(store.state.panY).toBe(4)
  })

  it('notifies subscribers until they unsubscribe', () => {
    const store = openStore()
    let seen = 0
    const stop = store.subscribe(() => {
      seen += 1
    })
    store.moveBone('upper', 1, 0)
    stop()
    store.moveBone('upper', 1, 0)
    expect(seen).toBe(1)
  })
})

describe('session predicates', () => {
  it('only a dirty open case can commit', () => {
    expect(canCommit(initialState())).toBe(false)
    const store = openStore()
    expect(canCommit(store.state)).toBe(false)
    store.moveBone('upper', 0, -1)
    expect(canCommit(store.state)).toBe(true)
  })

  it('warns on leave exactly when dirty', () => {
    const store = openStore()
    expect(shouldWarnOnLeave(store.state)).toBe(false)
    store.moveBone('upper', 0, -1)
    expect(shouldWarnOnLeave(store.state)).toBe(true)
    store.committed()
    expect(shouldWarnOnLeave(store.state)).toBe(false)
  })

  it('treats only the all-zero shift as identity', () => {
    expect(isIdentity({ thetaDeg: 0, dxPx: 0, dyPx: 0 })).toBe(true)
    expect(isIdentity({ thetaDeg: 0, dxPx: 0, dyPx: -0.25 })).toBe(false)
    expect(isIdentity({ thetaDeg: 1, dxPx: 0, dyPx: 0 })).toBe(false)
  })
})
