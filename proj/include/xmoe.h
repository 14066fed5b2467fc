/* SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the sparse mixture-of-experts training and analysis
 * engine. All state lives behind the opaque xmoe_engine handle; every
 * command returns one of the XMOE_* status codes below, and a human-
 * readable message for the last failure is available per handle.
 *
 * Status codes double as process exit codes:
 *   0 success, 2 configuration error, 3 runtime/numerical error,
 *   4 verification-check failure (analyze jacobian / analyze span).
 */
#ifndef XMOE_H
#define XMOE_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#ifndef XMOE_API
#define XMOE_API __attribute__((visibility("default")))
#endif

#define XMOE_OK 0
#define XMOE_E_CONFIG 2
#define XMOE_E_RUNTIME 3
#define XMOE_E_CHECK 4

typedef struct xmoe_engine xmoe_engine;

/* Creates an engine with the default configuration. Never returns NULL
 * except on allocation failure. Free with xmoe_engine_free(). */
XMOE_API xmoe_engine* xmoe_engine_new(void);
XMOE_API void xmoe_engine_free(xmoe_engine* eng);

/* Message describing the last failed call on this handle, or "" if none.
 * The pointer stays valid until the next call on the same handle. */
XMOE_API const char* xmoe_last_error(const xmoe_engine* eng);

XMOE_API const char* xmoe_version(void);

/* Loads an INI config file into the engine. Later calls and overrides win. */
XMOE_API int xmoe_load_config(xmoe_engine* eng, const char* path);

/* Sets one "section.key" to a value, e.g. ("train.steps", "500"). */
XMOE_API int xmoe_set_option(xmoe_engine* eng, const char* dotted_key, const char* value);

/* Commands. out_dir is created if missing; every command writes its CSV/JSON
 * outputs plus a run.json provenance record there. */
XMOE_API int xmoe_gen_data(xmoe_engine* eng, const char* out_dir);
XMOE_API int xmoe_pretrain(xmoe_engine* eng, const char* out_dir);
XMOE_API int xmoe_finetune(xmoe_engine* eng, const char* checkpoint_path, const char* out_dir);

/* kind: rc | rf | ic | jacobian | span | export.
 * inputs: checkpoint files (rc/rf/span/export) or train_log.csv files (ic). */
XMOE_API int xmoe_analyze(xmoe_engine* eng, const char* kind, const char* const* inputs,
                          size_t n_inputs, const char* out_dir);

/* axis: routing_dim | alpha | variant | gating | components;
 * values_csv: comma-separated list, e.g. "N/4,N/2,N,2N,4N". */
XMOE_API int xmoe_ablate(xmoe_engine* eng, const char* axis, const char* values_csv,
                         const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* XMOE_H */
