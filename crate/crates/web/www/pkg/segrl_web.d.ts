/* tslint:disable */
/* eslint-disable */

/**
 * Fits `y = w x + b` by least squares and by Huber IRLS.
 */
export function compare_fits(x: Float64Array, y: Float64Array): string;

/**
 * Spreads segment rewards over tokens. `lengths` are the segment lengths.
 */
export function interpolate_rewards(rewards: Float64Array, lengths: Uint32Array, strategy: string): string;

/**
 * Samples a response from the reference process of task `seed`, computes the
 * true entropy of the distribution each token was drawn from, and opens a
 * segment wherever that entropy exceeds `c_ent`.
 */
export function segment_sample(seed: bigint, c_ent: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly compare_fits: (a: number, b: number, c: number, d: number) => [number, number];
    readonly interpolate_rewards: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly segment_sample: (a: bigint, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
