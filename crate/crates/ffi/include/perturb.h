#ifndef PERTURB_H
#define PERTURB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PT_PIXELS 2304

#define PT_NUM_CLASSES 7

typedef enum PtStatus {
  PT_STATUS_OK = 0,
  PT_STATUS_NULL_POINTER = 1,
  PT_STATUS_INVALID_ARGUMENT = 2,
  PT_STATUS_IO = 3,
  PT_STATUS_SHAPE = 4,
  PT_STATUS_NUMERIC = 5,
  PT_STATUS_VARIANT = 6,
  PT_STATUS_CONTRACT = 7,
  PT_STATUS_DEGENERATE = 8,
  PT_STATUS_CHECKPOINT = 9,
  PT_STATUS_PANIC = 10,
} PtStatus;

/**
 * A fitted clustering of the 48×48 grid.
 */
typedef struct PtCluster PtCluster;

/**
 * A loaded model.
 */
typedef struct PtModel PtModel;

/**
 * Library version as a static NUL-terminated string.
 */
const char *pt_version(void);

/**
 * Message for the last failure on this thread, or null. Valid until the next failing call.
 */
const char *pt_last_error(void);

/**
 * Weighted distance between pixels (i, j, a) and (k, l, b).
 */
double pt_pixel_distance(size_t i,
                         size_t j,
                         double a,
                         size_t k,
                         size_t l,
                         double b,
                         double lambda,
                         double alpha);

/**
 * Loads a checkpoint written by the `perturb` tool.
 */
enum PtStatus pt_model_load(const char *path, struct PtModel **out);

void pt_model_free(struct PtModel *model);

/**
 * Writes 7 class probabilities for one image.
 */
enum PtStatus pt_model_predict(const struct PtModel *model,
                               const double *pixels,
                               double *out_probs);

/**
 * Writes the 48×48 attention map of an attention-classifier model.
 */
enum PtStatus pt_model_extract_attention(const struct PtModel *model,
                                         const double *pixels,
                                         double *out_map);

/**
 * Writes the normalized 48×48 gradient saliency of `class_index`.
 */
enum PtStatus pt_model_saliency(const struct PtModel *model,
                                const double *pixels,
                                size_t class_index,
                                double *out_map);

/**
 * Clusters a 48×48 intensity grid with the default iteration settings.
 */
enum PtStatus pt_cluster_fit(const double *grid,
                             size_t k,
                             double lambda,
                             double alpha,
                             uint64_t seed,
                             struct PtCluster **out);

size_t pt_cluster_k(const struct PtCluster *cluster);

enum PtStatus pt_cluster_inertia(const struct PtCluster *cluster, double *out);

/**
 * Writes 2304 cluster labels in `[0, k)`.
 */
enum PtStatus pt_cluster_assignments(const struct PtCluster *cluster, uint32_t *out);

void pt_cluster_free(struct PtCluster *cluster);

#endif  /* PERTURB_H */
