/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Stratified sample over a comma-separated channel list and the prompt
     * it produces for question `id`.
     */
    assemble(id: string, channels: string, shots: number): string;
    /**
     * Caption of the test question's image, if any (for the page header).
     */
    caption(id: string): string;
    /**
     * A fresh synthetic corpus. `noise` widens topic clusters (0 = every
     * item sits on its topic center).
     */
    constructor(seed: number, pool_size: number, eval_size: number, noise: number);
    /**
     * Eval questions as `[{id, text, topic, has_image}]`.
     */
    questions(): string;
    /**
     * Pool vectors of `channel`'s pool space projected onto their top two
     * principal axes, plus the query vector of `id` on the same axes when
     * it has one.
     */
    scatter(channel: string, id: string): string;
    /**
     * Top-`k` pool items for question `id` through one channel.
     */
    search(id: string, channel: string, k: number): string;
}

/**
 * Per-channel quotas for `shots` spread over a comma-separated channel list.
 */
export function quotas(channels: string, shots: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_assemble: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_caption: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_questions: (a: number) => [number, number];
    readonly demo_scatter: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_search: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly quotas: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
