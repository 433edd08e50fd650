import { ApiClient, ApiRequestError } from './api'
import { canCommit, SessionStore, shiftRecords } from './state'

/** Shown in the commit dialog so every annotator applies the same convention. */
export const CONTACT_CONVENTION =
  'Alignment convention: JSW = 0 when the contact surfaces touch; ' +
  'negative values mean the bones overlap past contact.'

export interface CommitOutcome {
  ok: boolean
  /** Field named by the service on a rejected commit. */
  errorField?: string
  errorMessage?: string
}

/**
 * Persist the working shifts. A rejected commit (400) surfaces as an inline
 * error on the session and leaves every working value untouched, so the
 * annotator can correct and retry without losing the alignment.
 */
export async function commitAnnotation(
  api: ApiClient,
  store: SessionStore,
  annotatorId: string,
): Promise<CommitOutcome> {
  const state = store.state
  if (!canCommit(state) || state.caseId === null) {
    return { ok: false, errorMessage: 'nothing to commit' }
  }
  try {
    await api.postAnnotation(state.caseId, shiftRecords(state), annotatorId)
  } catch (err) {
    if (err instanceof ApiRequestError) {
      store.commitFailed(err.field, err.message)
      return { ok: false, errorField: err.field, errorMessage: err.message }
    }
    throw err
  }
  store.committed()
  return { ok: true }
}
