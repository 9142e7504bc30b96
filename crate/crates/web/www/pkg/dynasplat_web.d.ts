/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    height(): number;
    /**
     * The model being trained. With `motion`, Gaussians it has marked dynamic are tinted.
     */
    model(view: number, t: number, motion: boolean): Uint8Array;
    n_dynamic(): number;
    n_gaussians(): number;
    constructor(seed: number);
    /**
     * PSNR of the model against ground truth for one view and time.
     */
    psnr(view: number, t: number): number;
    step(): number;
    total_steps(): number;
    /**
     * Runs up to `n` optimization steps and returns the mean loss.
     */
    train(n: number): number;
    /**
     * Ground truth at any time, as RGBA bytes. With `motion`, moving Gaussians are tinted.
     */
    truth(view: number, t: number, motion: boolean): Uint8Array;
    views(): number;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_height: (a: number) => number;
    readonly demo_model: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_n_dynamic: (a: number) => number;
    readonly demo_n_gaussians: (a: number) => number;
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_psnr: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_step: (a: number) => number;
    readonly demo_total_steps: (a: number) => number;
    readonly demo_train: (a: number, b: number) => [number, number, number];
    readonly demo_truth: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_views: (a: number) => number;
    readonly demo_width: (a: number) => number;
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
