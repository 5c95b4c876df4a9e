/* tslint:disable */
/* eslint-disable */

export function activation_map(band: number, phase: number, x0: number, y0: number, span: number, res: number): Float64Array;

/**
 * JSON of one analogy problem.
 */
export function analogy(m: number, k: number, scaling: boolean, seed: number): string;

/**
 * Spatial period lengths of each band, for labels.
 */
export function band_periods(): Float64Array;

export function band_size(): number;

/**
 * JSON of [`demo::FitView`].
 */
export function fit_dpp(m: number, steps: number, learning_rate: number): string;

export function num_bands(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly activation_map: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly analogy: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly band_periods: () => [number, number];
    readonly band_size: () => number;
    readonly fit_dpp: (a: number, b: number, c: number) => [number, number, number, number];
    readonly num_bands: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
