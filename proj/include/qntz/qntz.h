/* SPDX-License-Identifier: Apache-2.0 */
#ifndef QNTZ_QNTZ_H
#define QNTZ_QNTZ_H

#include <stddef.h>
#include <stdint.h>

#if defined(QNTZ_BUILDING_LIBRARY)
#define QNTZ_API __attribute__((visibility("default")))
#else
#define QNTZ_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. Every function returning qntz_status records a message on
 * failure, readable with qntz_last_error() from the same thread. */
typedef enum qntz_status {
  QNTZ_OK = 0,
  QNTZ_ERR_INVALID_ARGUMENT = 1,
  QNTZ_ERR_IO = 2,
  QNTZ_ERR_MALFORMED_HEADER = 3,
  QNTZ_ERR_TRUNCATED = 4,
  QNTZ_ERR_DUPLICATE_NAME = 5,
  QNTZ_ERR_INVARIANT_VIOLATION = 6,
  QNTZ_ERR_MANIFEST_SYNTAX = 7,
  QNTZ_ERR_DANGLING_REFERENCE = 8,
  QNTZ_ERR_SHAPE_MISMATCH = 9,
  QNTZ_ERR_NON_FINITE = 10,
  QNTZ_ERR_INVALID_CODE = 11,
  QNTZ_ERR_ACCUMULATOR_OVERFLOW = 12,
  QNTZ_ERR_MISSING_FORMAT = 13,
  QNTZ_ERR_UNSUPPORTED = 14,
  QNTZ_ERR_EMPTY_INPUT = 15,
  QNTZ_ERR_DIVERGED = 16,
  QNTZ_ERR_INTERNAL = 99
} qntz_status;

/* Output format for rendered reports. */
typedef enum qntz_format {
  QNTZ_FORMAT_JSON = 0,
  QNTZ_FORMAT_TEXT = 1,
  QNTZ_FORMAT_CSV = 2
} qntz_format;

/* A model: graph manifest plus tensor container. */
typedef struct qntz_model qntz_model;

typedef struct qntz_quant_config {
  size_t cluster_size; /* filters per shared scale (N) */
  int weight_bits;     /* 2 (ternary) or 4 */
  int fc_int8;         /* nonzero keeps fc weights at 8 bits */
  size_t threads;
} qntz_quant_config;

typedef struct qntz_toy_config {
  uint64_t data_seed;
  uint64_t model_seed;
  size_t train_samples;
  size_t test_samples;
  size_t calibration_samples;
  size_t epochs;
  double noise;
  double gain_spread;
} qntz_toy_config;

typedef struct qntz_finetune_config {
  size_t epochs;
  double lr;
  double momentum;
  size_t batch_size;
  uint64_t seed;
  qntz_quant_config quant;
  size_t threads;
} qntz_finetune_config;

QNTZ_API const char* qntz_version(void);
QNTZ_API const char* qntz_status_name(qntz_status status);
/* Message of the last failure on this thread; empty after a success. */
QNTZ_API const char* qntz_last_error(void);

/* Strings returned through char** are owned by the caller. */
QNTZ_API void qntz_string_free(char* s);

QNTZ_API void qntz_quant_config_default(qntz_quant_config* config);
QNTZ_API void qntz_toy_config_default(qntz_toy_config* config);
QNTZ_API void qntz_finetune_config_default(qntz_finetune_config* config);

QNTZ_API qntz_status qntz_model_load(const char* graph_path, const char* container_path,
                                     qntz_model** out);
QNTZ_API qntz_status qntz_model_save(const qntz_model* model, const char* graph_path,
                                     const char* container_path);
QNTZ_API void qntz_model_free(qntz_model* model);
QNTZ_API size_t qntz_model_layer_count(const qntz_model* model);
/* JSON: input shape and formats plus one entry per layer. */
QNTZ_API qntz_status qntz_model_describe(const qntz_model* model, char** json);

/* Quantizes every float conv/fc weight in place. Fails on a model that is
 * already quantized. `report` (optional) receives the error report JSON. */
QNTZ_API qntz_status qntz_quantize(qntz_model* model, const qntz_quant_config* config,
                                   char** report);

/* Chooses activation formats from the `input.<n>` tensors of a container.
 * With recompute_bn, batch-norm statistics are re-estimated first. */
QNTZ_API qntz_status qntz_calibrate(qntz_model* model, const char* batches_path,
                                    int recompute_bn, size_t threads, char** report);

/* Runs every `input.<n>` batch. mode is "float", "quant" or "int". When
 * output_path is given, writes `output.<n>` (and `act.<layer>.<n>` when
 * dump_activations is set). Labels `label.<n>` are scored when present. With
 * top_k > 0 the report lists the top_k classes of every sample. */
QNTZ_API qntz_status qntz_infer(const qntz_model* model, const char* input_path,
                                const char* mode, size_t threads, int dump_activations,
                                size_t top_k, const char* output_path, char** report);

/* Static operation counts. Float layers are counted as `config` would
 * quantize them. */
QNTZ_API qntz_status qntz_analyze(const qntz_model* model, const qntz_quant_config* config,
                                  size_t batch, char** report);

/* Writes train.qtz, test.qtz, calib.qtz and the trained float model
 * (float.graph, float.qtz) into `directory`. */
QNTZ_API qntz_status qntz_toy_build(const qntz_toy_config* config, const char* directory,
                                    char** report);

/* Low-precision fine-tuning of a float model. `shadow` receives the trained
 * float weights, `quantized` their integer-ready export (either may be null). */
QNTZ_API qntz_status qntz_finetune(const qntz_model* float_model, const char* train_path,
                                   const char* eval_path, const char* calibration_path,
                                   const qntz_finetune_config* config, qntz_model** shadow,
                                   qntz_model** quantized, char** report);

/* Renders any report JSON produced above. */
QNTZ_API qntz_status qntz_render(const char* report_json, qntz_format format, char** out);

/* Consolidates quantize/infer JSON artifacts into a sweep table
 * (QNTZ_FORMAT_TEXT gives markdown). */
QNTZ_API qntz_status qntz_report(const char* const* paths, size_t count, qntz_format format,
                                 char** out);

/* Lowercase hex SHA-256 of a file; `hex` must hold 65 bytes. */
QNTZ_API qntz_status qntz_file_sha256(const char* path, char* hex);

#ifdef __cplusplus
}
#endif

#endif /* QNTZ_QNTZ_H */
