/* tslint:disable */
/* eslint-disable */

/**
 * Fits a beta prior to observed reporting rates and returns the implied
 * distribution of reports out of `n` true cases.
 */
export function beta_prior_fit(rates: Float64Array, n: number): string;

/**
 * Log evidence of a simulated series over a grid of drift scales.
 */
export function sigma_scan(days: number, lambda0: number, sigma_true: number, grid: Float64Array, particles: number, seed: bigint): string;

/**
 * Simulates a series and returns the smoothed now-cast next to the truth.
 */
export function simulate_and_nowcast(days: number, lambda0: number, sigma_true: number, weekend_z: number, sigma: number, particles: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly beta_prior_fit: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sigma_scan: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number, number, number];
    readonly simulate_and_nowcast: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
