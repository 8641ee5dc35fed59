/* tslint:disable */
/* eslint-disable */

/**
 * A small phredGAN trained in the page on a two-persona synthetic corpus.
 */
export class DemoModel {
    free(): void;
    [Symbol.dispose](): void;
    epoch(): bigint;
    constructor(dialogues: number, hidden: number, seed_value: number);
    personas(): string[];
    /**
     * Ranked replies of `persona` to `text`, spoken by the other persona, as JSON.
     */
    respond(persona: string, text: string, samples: number, alpha: number): string;
    /**
     * A few corpus lines, for the page to show what the model learns from.
     */
    sample_dialogue(index: number): string;
    /**
     * One epoch of gated adversarial training; returns the mean step MLE loss.
     */
    train_epoch(): number;
}

export function metrics(hypotheses: string, references: string): string;

/**
 * `steps × dim` noise values, row-major, for `mode` ("utterance" or "word").
 */
export function noise_samples(mode: string, alpha: number, dim: number, steps: number, seed_value: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demomodel_free: (a: number, b: number) => void;
    readonly demomodel_epoch: (a: number) => bigint;
    readonly demomodel_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demomodel_personas: (a: number) => [number, number];
    readonly demomodel_respond: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demomodel_sample_dialogue: (a: number, b: number) => [number, number];
    readonly demomodel_train_epoch: (a: number) => [number, number, number];
    readonly metrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly noise_samples: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
