/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_memorydemo_free: (a: number, b: number) => void;
export const __wbg_mixview_free: (a: number, b: number) => void;
export const __wbg_scatter_free: (a: number, b: number) => void;
export const domain_scatter: (a: number, b: number, c: number) => [number, number, number];
export const memorydemo_centroids: (a: number) => [number, number];
export const memorydemo_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const memorydemo_probabilities: (a: number, b: number, c: number) => [number, number, number, number];
export const memorydemo_set_momentum: (a: number, b: number) => [number, number];
export const memorydemo_step: (a: number, b: number) => [number, number, number, number];
export const memorydemo_steps: (a: number) => number;
export const metabn_mix: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const mixview_lambda: (a: number) => number;
export const mixview_mixed: (a: number) => [number, number];
export const mixview_plain: (a: number) => [number, number];
export const mixview_sampled: (a: number) => [number, number];
export const mixview_test: (a: number) => [number, number];
export const scatter_domains: (a: number) => [number, number];
export const scatter_is_empty: (a: number) => number;
export const scatter_labels: (a: number) => [number, number];
export const scatter_len: (a: number) => number;
export const scatter_points: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
