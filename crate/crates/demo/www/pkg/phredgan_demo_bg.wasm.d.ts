/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demomodel_free: (a: number, b: number) => void;
export const demomodel_epoch: (a: number) => bigint;
export const demomodel_new: (a: number, b: number, c: number) => [number, number, number];
export const demomodel_personas: (a: number) => [number, number];
export const demomodel_respond: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const demomodel_sample_dialogue: (a: number, b: number) => [number, number];
export const demomodel_train_epoch: (a: number) => [number, number, number];
export const metrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const noise_samples: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
