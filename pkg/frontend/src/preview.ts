import { PreviewResult, ShiftRecord } from './types'

export interface PreviewRequest {
  caseId: string
  shifts: ShiftRecord[]
}

export type PreviewSend = (req: PreviewRequest) => Promise<PreviewResult>

/**
 * Debounced preview pipeline with at most one request on the wire.
 *
 * Drags arrive far faster than the service can re-render, so requests are
 * coalesced twice: a short debounce window absorbs pointer-move bursts, and
 * while a request is in flight any newer one just replaces the pending slot.
 * When the wire clears, the latest pending request goes out immediately (its
 * debounce already happened). Results that have been superseded by a newer
 * pending request are dropped rather than flashed on screen.
 */
export class PreviewScheduler {
  inFlight = false
  private pending: PreviewRequest | null = null
  private timer: ReturnType<typeof setTimeout> | null = null

  constructor(
    private send: PreviewSend,
    private onResult: (req: PreviewRequest, result: PreviewResult) => void,
    private onError: (err: unknown) => void,
    private debounceMs = 120,
  ) {}

  request(req: PreviewRequest): void {
    this.pending = req
    if (this.timer !== null) clearTimeout(this.timer)
    this.timer = setTimeout(() => {
      this.timer = null
      if (!this.inFlight) this.issue()
    }, this.debounceMs)
  }

  /** Drop anything not yet sent (case changed, shifts reset). */
  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer)
    this.timer = null
    this.pending = null
  }

  private issue(): void {
    const req = this.pending
    if (req === null) return
    this.pending = null
    this.inFlight = true
    this.send(req)
      .then((result) => {
        if (this.pending === null) this.onResult(req, result)
      })
      .catch((err) => this.onError(err))
      .finally(() => {
        this.inFlight = false
        // the pending request was debounced before it queued up behind us
        if (this.pending !== null && this.timer === null) this.issue()
      })
  }
}
