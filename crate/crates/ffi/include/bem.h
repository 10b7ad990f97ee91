#ifndef BEM_H
#define BEM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BemDataset {
  BEM_DATASET_BIOASQ = 0,
  BEM_DATASET_COVIDQA = 1,
} BemDataset;

typedef enum BemFormat {
  BEM_FORMAT_BINARY = 0,
  BEM_FORMAT_JSONL = 1,
} BemFormat;

typedef enum BemStatus {
  BEM_STATUS_OK = 0,
  BEM_STATUS_NULL_ARGUMENT = 1,
  BEM_STATUS_INVALID_UTF8 = 2,
  BEM_STATUS_IO = 3,
  BEM_STATUS_FORMAT = 4,
  BEM_STATUS_INVALID_CONFIG = 5,
  BEM_STATUS_INVALID_INPUT = 6,
  BEM_STATUS_UNDEFINED_METRIC = 7,
  BEM_STATUS_BUFFER_TOO_SMALL = 8,
  BEM_STATUS_INTERNAL = 9,
  BEM_STATUS_PANIC = 10,
} BemStatus;

typedef enum BemStrategy {
  BEM_STRATEGY_STM = 0,
  BEM_STRATEGY_BEM = 1,
} BemStrategy;

typedef struct BemLexicon BemLexicon;

typedef struct BemVocab BemVocab;

typedef struct BemMaskingOptions {
  enum BemStrategy strategy;
  double rho;
  uint64_t seed;
  uint32_t window_len;
  uint32_t batch_size;
  bool background_stm;
} BemMaskingOptions;

/**
 * Metric values. Accuracies are NaN when the golds are sentence indices.
 */
typedef struct BemMetrics {
  size_t questions;
  double p_at_1;
  double r_at_3;
  double mrr;
  double strict_acc;
  double lenient_acc;
} BemMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t bem_last_error(char *buf, size_t cap);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BemStatus bem_vocab_load(const char *path, bool lowercase, struct BemVocab **out);

/**
 * # Safety
 * `vocab` must be null or a handle from [`bem_vocab_load`].
 */
size_t bem_vocab_size(const struct BemVocab *vocab);

/**
 * # Safety
 * `vocab` must be null or a handle from [`bem_vocab_load`] not freed yet.
 */
void bem_vocab_free(struct BemVocab *vocab);

/**
 * Tokenizes `text` into `ids`. `out_len` always receives the number of
 * tokens; if it exceeds `cap` nothing is written and `BufferTooSmall` is
 * returned.
 *
 * # Safety
 * `ids` must point to `cap` writable values (or be null when `cap` is 0).
 */
enum BemStatus bem_tokenize(const struct BemVocab *vocab,
                            const char *text,
                            uint32_t *ids,
                            size_t cap,
                            size_t *out_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BemStatus bem_lexicon_load(const char *path, struct BemLexicon **out);

/**
 * # Safety
 * `lexicon` must be null or a handle from [`bem_lexicon_load`].
 */
size_t bem_lexicon_size(const struct BemLexicon *lexicon);

/**
 * # Safety
 * `lexicon` must be null or a handle from [`bem_lexicon_load`] not freed yet.
 */
void bem_lexicon_free(struct BemLexicon *lexicon);

struct BemMaskingOptions bem_masking_options_default(void);

/**
 * Masks the corpus JSONL at `corpus_path` and writes a batch file to
 * `out_path`. `lexicon` may be null for the STM strategy.
 *
 * # Safety
 * Paths must be NUL-terminated strings; handles must be live.
 */
enum BemStatus bem_mask_corpus(const char *corpus_path,
                               const struct BemVocab *vocab,
                               const struct BemLexicon *lexicon,
                               const struct BemMaskingOptions *options,
                               enum BemFormat format,
                               const char *out_path);

/**
 * Evaluates a predictions JSONL against a golds JSONL.
 *
 * # Safety
 * Paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum BemStatus bem_evaluate(const char *predictions_path,
                            const char *golds_path,
                            enum BemDataset dataset,
                            struct BemMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEM_H */
