import { CaseSummary } from './types'

export interface CaseFilters {
  kind: string | null
  split: string | null
}

export function filterCases(cases: CaseSummary[], filters: CaseFilters): CaseSummary[] {
  return cases.filter(
    (c) =>
      (filters.kind === null || c.kind === filters.kind) &&
      (filters.split === null || c.split === filters.split),
  )
}

/** Distinct values for the filter dropdowns, in listing order. */
export function filterOptions(cases: CaseSummary[], key: 'kind' | 'split'): string[] {
  const seen: string[] = []
  for (const c of cases) {
    if (!seen.includes(c[key])) seen.push(c[key])
  }
  return seen
}

export function caseBadges(summary: CaseSummary): string[] {
  const badges: string[] = []
  if (summary.annotated) badges.push('annotated')
  if (!summary.has_layers) badges.push('no layers')
  return badges
}

/** Message shown in place of the list when it is empty. */
export function emptyNotice(total: number, filtered: number): string | null {
  if (total === 0) return 'No cases in the manifest.'
  if (filtered === 0) return 'No cases match the current filters.'
  return null
}
