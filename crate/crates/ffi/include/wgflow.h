#ifndef WGFLOW_H
#define WGFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum WgfStatus {
  WGF_STATUS_OK = 0,
  WGF_STATUS_NULL_POINTER = 1,
  WGF_STATUS_CONFIG = 2,
  WGF_STATUS_STRUCTURAL = 3,
  WGF_STATUS_NUMERIC = 4,
  WGF_STATUS_PARAMETER = 5,
  WGF_STATUS_DOMAIN = 6,
  WGF_STATUS_FORMAT = 7,
  WGF_STATUS_IO = 8,
  WGF_STATUS_OTHER = 9,
  WGF_STATUS_PANIC = 10,
} WgfStatus;

/*
 A trained operator loaded from a checkpoint.
 */
typedef struct WgfOperator WgfOperator;

/*
 Message for the last failed call on this thread; empty if none.
 The pointer stays valid until the next failing call on the same thread.
 */
const char *wgf_last_error(void);

/*
 Load an operator checkpoint. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WgfStatus wgf_operator_load(const char *path, struct WgfOperator **out);

/*
 Release a handle from [`wgf_operator_load`]. Null is ignored.

 # Safety
 `op` must come from [`wgf_operator_load`] and not be used afterwards.
 */
void wgf_operator_free(struct WgfOperator *op);

/*
 Spatial dimension of the operator, or 0 for a null handle.

 # Safety
 `op` must be null or a live handle.
 */
size_t wgf_operator_dim(const struct WgfOperator *op);

/*
 Displacements at `n_queries` points for the field induced by the prompt
 (`m` points with density values). `pq` is null or two doubles `(p, q)`.
 `out` receives `n_queries * dim` doubles.

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum WgfStatus wgf_operator_displacements(const struct WgfOperator *op,
                                          const double *points,
                                          const double *densities,
                                          size_t m,
                                          const double *pq,
                                          const double *queries,
                                          size_t n_queries,
                                          double *out);

/*
 One JKO step: moves the `m` points and rescales their densities in
 `out_points` (`m * dim`) and `out_densities` (`m`).

 # Safety
 Buffers must hold the stated number of doubles.
 */
enum WgfStatus wgf_operator_step(const struct WgfOperator *op,
                                 const double *points,
                                 const double *densities,
                                 size_t m,
                                 const double *pq,
                                 double *out_points,
                                 double *out_densities);

/*
 Radius of the ring equilibrium of the `(p, q)` kernel.

 # Safety
 `out` must be a valid pointer.
 */
enum WgfStatus wgf_ring_radius(double p, double q, double *out);

/*
 Barenblatt density at time `t` and point `x` (`dim` doubles).

 # Safety
 `x` must hold `dim` doubles and `out` be a valid pointer.
 */
enum WgfStatus wgf_barenblatt_density(double m_exponent,
                                      size_t dim,
                                      double c,
                                      double t0,
                                      double t,
                                      const double *x,
                                      double *out);

/*
 Chamfer distance between `n_a` and `n_b` points of dimension `dim`.

 # Safety
 `a` and `b` must hold `n_a * dim` and `n_b * dim` doubles.
 */
enum WgfStatus wgf_chamfer(const double *a,
                           size_t n_a,
                           const double *b,
                           size_t n_b,
                           size_t dim,
                           double *out);

/*
 Attraction-repulsion kernel `r^(q+1)/(q+1) - r^(p+1)/(p+1)`.

 # Safety
 `out` must be a valid pointer.
 */
enum WgfStatus wgf_kernel(double r, double p, double q, double *out);

#endif  /* WGFLOW_H */
