#ifndef MMLAYOUT_H
#define MMLAYOUT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmlStatus {
  MML_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MML_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MML_STATUS_UTF8 = 2,
  /**
   * The document or file failed validation.
   */
  MML_STATUS_PARSE = 3,
  /**
   * An argument or configuration value was rejected.
   */
  MML_STATUS_INVALID = 4,
  MML_STATUS_IO = 5,
  MML_STATUS_CHECKPOINT = 6,
  MML_STATUS_NUMERIC = 7,
  /**
   * An unexpected internal failure, including caught panics.
   */
  MML_STATUS_INTERNAL = 8,
} MmlStatus;

/**
 * A parsed document page.
 */
typedef struct MmlDocument MmlDocument;

/**
 * A multi-grained document graph.
 */
typedef struct MmlGraph MmlGraph;

/**
 * A trained model with its parameters.
 */
typedef struct MmlModel MmlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last error on this thread; empty when none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mml_last_error(void);

/**
 * Library version as a static string.
 */
const char *mml_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void mml_string_free(char *s);

/**
 * Boundary distance between two boxes given as `[x0, y0, x1, y1]`.
 *
 * # Safety
 * `a`, `b` and `out` must point to valid memory (4, 4 and 1 doubles).
 */
enum MmlStatus mml_boundary_distance(const double *a, const double *b, double *out);

/**
 * Parses a document from a JSON string.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum MmlStatus mml_document_from_json(const char *json, struct MmlDocument **out);

/**
 * Loads a document JSON file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum MmlStatus mml_document_load(const char *path, struct MmlDocument **out);

/**
 * # Safety
 * `doc` must be a valid document handle.
 */
enum MmlStatus mml_document_num_words(const struct MmlDocument *doc, uintptr_t *out);

/**
 * # Safety
 * `doc` must be a valid document handle.
 */
enum MmlStatus mml_document_num_segments(const struct MmlDocument *doc, uintptr_t *out);

/**
 * # Safety
 * `doc` must be null or a handle from this library that has not been freed.
 */
void mml_document_free(struct MmlDocument *doc);

/**
 * Builds the document graph with clustering radius `radius` and a
 * `cols` × `rows` patch grid. The graph keeps its own copy of the page.
 *
 * # Safety
 * `doc` must be a valid document handle; `out` must be writable.
 */
enum MmlStatus mml_graph_build(const struct MmlDocument *doc,
                               double radius,
                               uintptr_t min_pts,
                               uintptr_t cols,
                               uintptr_t rows,
                               struct MmlGraph **out);

/**
 * # Safety
 * `graph` must be a valid graph handle; `out` must be writable.
 */
enum MmlStatus mml_graph_num_regions(const struct MmlGraph *graph, uintptr_t *out);

/**
 * Graph as JSON: regions, patch grid and parent maps.
 *
 * # Safety
 * `graph` must be a valid graph handle; `out` must be writable.
 */
enum MmlStatus mml_graph_to_json(const struct MmlGraph *graph, char **out);

/**
 * SVG drawing of the segments and salient regions.
 *
 * # Safety
 * `graph` must be a valid graph handle; `out` must be writable.
 */
enum MmlStatus mml_graph_render_svg(const struct MmlGraph *graph, char **out);

/**
 * # Safety
 * `graph` must be null or a handle from this library that has not been freed.
 */
void mml_graph_free(struct MmlGraph *graph);

/**
 * Loads a checkpoint written by `mmlayout train`.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum MmlStatus mml_model_load(const char *path, struct MmlModel **out);

/**
 * Predicted BIO tag per word, as a JSON array of strings.
 *
 * # Safety
 * `model` and `doc` must be valid handles; `out` must be writable.
 */
enum MmlStatus mml_model_predict(const struct MmlModel *model,
                                 const struct MmlDocument *doc,
                                 char **out);

/**
 * # Safety
 * `model` must be null or a handle from this library that has not been freed.
 */
void mml_model_free(struct MmlModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMLAYOUT_H */
