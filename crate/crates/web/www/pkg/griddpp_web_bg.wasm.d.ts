/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const activation_map: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const analogy: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const band_periods: () => [number, number];
export const band_size: () => number;
export const fit_dpp: (a: number, b: number, c: number) => [number, number, number, number];
export const num_bands: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
