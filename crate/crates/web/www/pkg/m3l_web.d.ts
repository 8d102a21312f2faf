/* tslint:disable */
/* eslint-disable */

/**
 * Identity memory over 2-d unit embeddings. Identity `k`'s true direction
 * sits at angle `2 pi k / n`; batches scatter around those directions.
 */
export class MemoryDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Slot centroids as `x, y` pairs.
     */
    centroids(): Float64Array;
    constructor(n_ids: number, momentum: number, temperature: number, noise: number, seed: number);
    /**
     * Softmax over slots for a query direction.
     */
    probabilities(x: number, y: number): Float64Array;
    set_momentum(momentum: number): void;
    step(per_id: number): Float64Array;
    steps(): number;
}

/**
 * Before/after views of one MetaBN mixture.
 */
export class MixView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    lambda(): number;
    /**
     * Mixture after batch normalization.
     */
    mixed(): Float64Array;
    /**
     * Meta-test batch after plain batch normalization.
     */
    plain(): Float64Array;
    /**
     * Draws from the meta-train domain's batch statistics.
     */
    sampled(): Float64Array;
    /**
     * Raw meta-test batch.
     */
    test(): Float64Array;
}

/**
 * Points of every domain with their domain and identity tags.
 */
export class Scatter {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    domains(): Uint32Array;
    is_empty(): boolean;
    labels(): Uint32Array;
    len(): number;
    points(): Float64Array;
}

/**
 * Synthetic domains seen through the first two input coordinates, where the
 * identity centers live.
 */
export function domain_scatter(shift: number, nuisance: number, seed: number): Scatter;

/**
 * Mixes domain `test_domain` with draws from `train_domain`'s statistics at
 * coefficient `lambda`.
 */
export function metabn_mix(lambda: number, test_domain: number, train_domain: number, shift: number, seed: number): MixView;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_memorydemo_free: (a: number, b: number) => void;
    readonly __wbg_mixview_free: (a: number, b: number) => void;
    readonly __wbg_scatter_free: (a: number, b: number) => void;
    readonly domain_scatter: (a: number, b: number, c: number) => [number, number, number];
    readonly memorydemo_centroids: (a: number) => [number, number];
    readonly memorydemo_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly memorydemo_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
    readonly memorydemo_set_momentum: (a: number, b: number) => [number, number];
    readonly memorydemo_step: (a: number, b: number) => [number, number, number, number];
    readonly memorydemo_steps: (a: number) => number;
    readonly metabn_mix: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly mixview_lambda: (a: number) => number;
    readonly mixview_mixed: (a: number) => [number, number];
    readonly mixview_plain: (a: number) => [number, number];
    readonly mixview_sampled: (a: number) => [number, number];
    readonly mixview_test: (a: number) => [number, number];
    readonly scatter_domains: (a: number) => [number, number];
    readonly scatter_is_empty: (a: number) => number;
    readonly scatter_labels: (a: number) => [number, number];
    readonly scatter_len: (a: number) => number;
    readonly scatter_points: (a: number) => [number, number];
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
