/** Wire types mirrored from the annotation service JSON. */

export interface CaseSummary {
  id: string
  kind: string
  split: string
  pixel_spacing_mm: number
  jsw_mm: number | null
  has_layers: boolean
  annotated: boolean
}

/** One bone layer's rigid shift. Layer 1 is the lower bone, layer 2 the upper. */
export interface ShiftRecord {
  layer: number
  theta_deg: number
  dx_px: number
  dy_px: number
}

export interface AnnotationRecord {
  case_id: string
  shift: ShiftRecord[]
  pixel_spacing_mm: number
  baseline_jsw_mm: number
  axis: [number, number]
  jsw_mm: number
  annotator_id: string
  timestamp: string
}

export interface PreviewResult {
  /** PNG bytes of the re-rendered composite. */
  image: ArrayBuffer
  /** Derived width for the working shifts, straight from the response header. */
  jswMm: number
  baselineJswMm: number
}

export type Bone = 'upper' | 'lower'

export const BONE_LAYER: Record<Bone, number> = { lower: 1, upper: 2 }
