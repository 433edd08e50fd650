import { ApiClient } from './api'
import { dragToImageDelta, keyToNudge, zoomAt } from './align'
import { CaseFilters, caseBadges, emptyNotice, filterCases, filterOptions } from './browser'
import { drawScene } from './canvas'
import { commitAnnotation, CONTACT_CONVENTION } from './commit'
import { PreviewScheduler } from './preview'
import { canCommit, SessionStore, shiftRecords, shouldWarnOnLeave } from './state'
import { Bone, CaseSummary } from './types'

const LAYER_NAMES = ['soft tissue', 'lower bone', 'upper bone']

function apiBase(): string {
  // override with ?api=http://host:port when the service runs elsewhere
  const param = new URLSearchParams(window.location.search).get('api')
  return param ?? 'http://127.0.0.1:8000'
}

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node as T
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err)
}

async function decodePng(buf: ArrayBuffer): Promise<ImageBitmap> {
  return createImageBitmap(new Blob([buf], { type: 'image/png' }))
}

async function init(): Promise<void> {
  const api = new ApiClient(apiBase())
  const store = new SessionStore()

  const canvas = byId<HTMLCanvasElement>('view')
  const maybeCtx = canvas.getContext('2d')
  if (!maybeCtx) throw new Error('canvas 2d context unavailable')
  const ctx = maybeCtx
  ctx.imageSmoothingEnabled = false

  const statusEl = byId<HTMLElement>('status')
  const jswEl = byId<HTMLElement>('jsw-value')
  const baselineEl = byId<HTMLElement>('baseline-value')
  const commitBtn = byId<HTMLButtonElement>('commit')
  const commitErrorEl = byId<HTMLElement>('commit-error')
  const dialog = byId<HTMLDialogElement>('commit-dialog')
  const annotatorInput = byId<HTMLInputElement>('annotator')
  const kindSelect = byId<HTMLSelectElement>('filter-kind')
  const splitSelect = byId<HTMLSelectElement>('filter-split')
  const listEl = byId<HTMLUListElement>('case-list')
  const noticeEl = byId<HTMLElement>('browser-notice')
  const layersFieldset = byId<HTMLElement>('layers')

  byId<HTMLElement>('convention').textContent = CONTACT_CONVENTION

  let cases: CaseSummary[] = []
  const filters: CaseFilters = { kind: null, split: null }
  let baseImage: ImageBitmap | null = null
  let previewImage: ImageBitmap | null = null
  let layerImages: (ImageBitmap | null)[] = [null, null, null]

  const setStatus = (text: string): void => {
    statusEl.textContent = text
  }

  const scheduler = new PreviewScheduler(
    (req) => api.preview(req.caseId, req.shifts),
    (req, result) => {
      if (req.caseId !== store.state.caseId) return
      void decodePng(result.image).then((bitmap) => {
        previewImage = bitmap
        // readout comes straight off the response headers
        store.applyPreview(result.jswMm, result.baselineJswMm)
      })
    },
    (err) => setStatus(`preview failed: ${describe(err)}`),
  )

  function render(): void {
    const state = store.state
    jswEl.textContent = state.jswMm === null ? 'n/a' : `${state.jswMm.toFixed(3)} mm`
    baselineEl.textContent =
      state.baselineJswMm === null ? '' : `baseline ${state.baselineJswMm.toFixed(3)} mm`
    commitBtn.disabled = !canCommit(state)
    commitErrorEl.hidden = state.commitError === null
    if (state.commitError) {
      const prefix = state.commitError.field ? `${state.commitError.field}: ` : ''
      commitErrorEl.textContent = `${prefix}${state.commitError.message}`
    }
    drawScene(
      ctx,
      { composite: previewImage ?? baseImage, layers: layerImages },
      state.layerViews,
      state.zoom,
      state.panX,
      state.panY,
    )
  }

  store.subscribe(render)

  /** Ask the service for the reconstruction matching the working shifts. */
  function alignmentChanged(): void {
    const state = store.state
    if (state.caseId === null) return
    const records = shiftRecords(state)
    if (records.length === 0) {
      // identity alignment: the stored composite already is the preview
      scheduler.cancel()
      previewImage = null
      if (state.baselineJswMm !== null) {
        store.applyPreview(state.baselineJswMm, state.baselineJswMm)
      } else {
        render()
      }
      return
    }
    scheduler.request({ caseId: state.caseId, shifts: records })
  }

  function renderBrowser(): void {
    fillOptions(kindSelect, 'all kinds', filterOptions(cases, 'kind'), filters.kind)
    fillOptions(splitSelect, 'all splits', filterOptions(cases, 'split'), filters.split)
    const visible = filterCases(cases, filters)
    listEl.textContent = ''
    for (const summary of visible) {
      const item = document.createElement('li')
      const button = document.createElement('button')
      button.type = 'button'
      button.textContent = summary.id
      button.classList.toggle('active', summary.id === store.state.caseId)
      button.addEventListener('click', () => void openCase(summary))
      item.appendChild(button)
      for (const badge of caseBadges(summary)) {
        const tag = document.createElement('span')
        tag.className = 'badge'
        tag.textContent = badge
        item.appendChild(tag)
      }
      listEl.appendChild(item)
    }
    const notice = emptyNotice(cases.length, visible.length)
    noticeEl.hidden = notice === null
    noticeEl.textContent = notice ?? ''
  }

  function fillOptions(
    select: HTMLSelectElement,
    placeholder: string,
    values: string[],
    current: string | null,
  ): void {
    select.textContent = ''
    const any = document.createElement('option')
    any.value = ''
    any.textContent = placeholder
    select.appendChild(any)
    for (const value of values) {
      const opt = document.createElement('option')
      opt.value = value
      opt.textContent = value
      select.appendChild(opt)
    }
    select.value = current ?? ''
  }

  async function openCase(summary: CaseSummary): Promise<void> {
    if (shouldWarnOnLeave(store.state) && !window.confirm('Discard unsaved alignment?')) {
      return
    }
    scheduler.cancel()
    previewImage = null
    baseImage = null
    layerImages = [null, null, null]
    store.openCase(summary)
    renderBrowser()
    setStatus(`loading ${summary.id}`)
    try {
      baseImage = await decodePng(await api.fetchPng(api.imageUrl(summary.id)))
      if (summary.has_layers) {
        layerImages = await Promise.all(
          LAYER_NAMES.map((_, i) => api.fetchPng(api.layerUrl(summary.id, i)).then(decodePng)),
        )
      }
      const stored = await api.getAnnotation(summary.id)
      if (stored && store.state.caseId === summary.id) {
        store.restoreShifts(stored.shift)
        store.applyPreview(stored.jsw_mm, stored.baseline_jsw_mm)
        const records = shiftRecords(store.state)
        if (records.length > 0) scheduler.request({ caseId: summary.id, shifts: records })
      }
      setStatus('')
    } catch (err) {
      setStatus(`load failed: ${describe(err)}`)
    }
    render()
    canvas.focus()
  }

  LAYER_NAMES.forEach((name, i) => {
    const row = document.createElement('label')
    row.className = 'layer-row'
    const checkbox = document.createElement('input')
    checkbox.type = 'checkbox'
    checkbox.addEventListener('change', () => store.setLayerVisible(i, checkbox.checked))
    const slider = document.createElement('input')
    slider.type = 'range'
    slider.min = '0'
    slider.max = '1'
    slider.step = '0.05'
    slider.value = String(store.state.layerViews[i].opacity)
    slider.addEventListener('input', () => store.setLayerOpacity(i, Number(slider.value)))
    row.append(checkbox, ` ${name} `, slider)
    layersFieldset.appendChild(row)
  })

  for (const radio of Array.from(
    document.querySelectorAll<HTMLInputElement>('input[name="bone"]'),
  )) {
    radio.addEventListener('change', () => {
      if (radio.checked) store.selectBone(radio.value as Bone)
    })
  }

  let dragging = false
  let panning = false
  let lastX = 0
  let lastY = 0

  canvas.addEventListener('pointerdown', (ev) => {
    if (store.state.caseId === null) return
    canvas.setPointerCapture(ev.pointerId)
    dragging = true
    panning = ev.button === 1 || ev.ctrlKey
    lastX = ev.clientX
    lastY = ev.clientY
  })

  canvas.addEventListener('pointermove', (ev) => {
    if (!dragging) return
    const dxScreen = ev.clientX - lastX
    const dyScreen = ev.clientY - lastY
    lastX = ev.clientX
    lastY = ev.clientY
    const state = store.state
    if (panning) {
      store.setView(state.zoom, state.panX + dxScreen, state.panY + dyScreen)
      return
    }
    const delta = dragToImageDelta(dxScreen, dyScreen, state.zoom)
    store.moveBone(state.selectedBone, delta.dxPx, delta.dyPx)
    alignmentChanged()
  })

  canvas.addEventListener('pointerup', () => {
    dragging = false
  })

  canvas.addEventListener(
    'wheel',
    (ev) => {
      ev.preventDefault()
      const state = store.state
      const rect = canvas.getBoundingClientRect()
      const view = zoomAt(
        state.zoom,
        state.panX,
        state.panY,
        ev.clientX - rect.left,
        ev.clientY - rect.top,
        ev.deltaY,
      )
      store.setView(view.zoom, view.panX, view.panY)
    },
    { passive: false },
  )

  canvas.addEventListener('keydown', (ev) => {
    if (store.state.caseId === null) return
    const nudge = keyToNudge(ev.key, ev.shiftKey)
    if (!nudge) return
    ev.preventDefault()
    store.nudgeSelected(nudge.dxSteps, nudge.dySteps, nudge.fine)
    alignmentChanged()
  })

  commitBtn.addEventListener('click', () => {
    dialog.showModal()
  })

  dialog.addEventListener('close', () => {
    if (dialog.returnValue === 'confirm') void runCommit()
  })

  async function runCommit(): Promise<void> {
    try {
      const outcome = await commitAnnotation(api, store, annotatorInput.value)
      if (outcome.ok) {
        setStatus('annotation saved')
        cases = await api.listCases()
        renderBrowser()
      }
    } catch (err) {
      setStatus(`commit failed: ${describe(err)}`)
    }
  }

  window.addEventListener('beforeunload', (ev) => {
    if (shouldWarnOnLeave(store.state)) ev.preventDefault()
  })

  kindSelect.addEventListener('change', () => {
    filters.kind = kindSelect.value || null
    renderBrowser()
  })
  splitSelect.addEventListener('change', () => {
    filters.split = splitSelect.value || null
    renderBrowser()
  })

  try {
    cases = await api.listCases()
  } catch (err) {
    setStatus(`cannot reach the annotation service at ${api.baseUrl}: ${describe(err)}`)
  }
  renderBrowser()
  render()
}

void init()
