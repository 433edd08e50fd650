import { AnnotationRecord, CaseSummary, PreviewResult, ShiftRecord } from './types'

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

/** A 400 from the service, carrying the offending field name. */
export class ApiRequestError extends Error {
  field: string

  constructor(field: string, message: string) {
    super(message)
    this.name = 'ApiRequestError'
    this.field = field
  }
}

async function raiseForStatus(res: Response): Promise<void> {
  if (res.ok) return
  let field = ''
  let message = `request failed with status ${res.status}`
  try {
    const body = await res.json()
    const detail = body.detail ?? body
    if (detail && typeof detail === 'object') {
      field = String(detail.field ?? '')
      message = String(detail.error ?? message)
    }
  } catch {
    // non-JSON error body, keep the status message
  }
  if (res.status === 400) throw new ApiRequestError(field, message)
  throw new Error(message)
}

/**
 * Typed client for the annotation service. The UI performs no width
 * arithmetic of its own; every jsw_mm it displays comes out of this client
 * verbatim.
 */
export class ApiClient {
  baseUrl: string
  private fetchImpl: FetchLike

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, '')
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init))
  }

  async listCases(): Promise<CaseSummary[]> {
    const res = await this.fetchImpl(`${this.baseUrl}/cases`)
    await raiseForStatus(res)
    const body = await res.json()
    return body.cases as CaseSummary[]
  }

  imageUrl(caseId: string): string {
    return `${this.baseUrl}/cases/${encodeURIComponent(caseId)}/image`
  }

  layerUrl(caseId: string, index: number): string {
    return `${this.baseUrl}/cases/${encodeURIComponent(caseId)}/layers/${index}`
  }

  async fetchPng(url: string): Promise<ArrayBuffer> {
    const res = await this.fetchImpl(url)
    await raiseForStatus(res)
    return res.arrayBuffer()
  }

  async preview(caseId: string, shifts: ShiftRecord[]): Promise<PreviewResult> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/cases/${encodeURIComponent(caseId)}/preview`,
      {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ shifts }),
      },
    )
    await raiseForStatus(res)
    const jsw = Number(res.headers.get('X-Jsw-Mm'))
    const baseline = Number(res.headers.get('X-Baseline-Jsw-Mm'))
    return { image: await res.arrayBuffer(), jswMm: jsw, baselineJswMm: baseline }
  }

  /** Latest stored annotation, or null when the case has none. */
  async getAnnotation(caseId: string): Promise<AnnotationRecord | null> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/cases/${encodeURIComponent(caseId)}/annotation`,
    )
    if (res.status === 404) return null
    await raiseForStatus(res)
    return (await res.json()) as AnnotationRecord
  }

  async postAnnotation(
    caseId: string,
    shifts: ShiftRecord[],
    annotatorId: string,
  ): Promise<AnnotationRecord> {
    const res = await this.fetchImpl(
      `${this.baseUrl}/cases/${encodeURIComponent(caseId)}/annotation`,
      {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ shifts, annotator_id: annotatorId }),
      },
    )
    await raiseForStatus(res)
    return (await res.json()) as AnnotationRecord
  }
}
