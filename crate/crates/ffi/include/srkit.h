#ifndef SRKIT_H
#define SRKIT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SrkitStatus {
  SRKIT_STATUS_OK = 0,
  SRKIT_STATUS_NULL_POINTER = 1,
  SRKIT_STATUS_NON_FINITE = 2,
  SRKIT_STATUS_SHAPE_MISMATCH = 3,
  SRKIT_STATUS_INVALID_CONFIG = 4,
  SRKIT_STATUS_NEGATIVE_SECOND_MOMENT = 5,
  SRKIT_STATUS_INTERNAL = 6,
} SrkitStatus;

typedef enum SrkitPolicy {
  SRKIT_POLICY_BF16_SR = 0,
  SRKIT_POLICY_BF16_NR = 1,
  SRKIT_POLICY_FP32_MASTER = 2,
} SrkitPolicy;

/**
 * Optimizer over a fixed list of tensors.
 */
typedef struct SrkitOptimizer SrkitOptimizer;

/**
 * Counter-based generator.
 */
typedef struct SrkitRng SrkitRng;

/**
 * Neighbors and spacing of a value on the bf16 grid.
 */
typedef struct SrkitQuantGrid {
  double floor;
  double ceil;
  double resolution;
} SrkitQuantGrid;

/**
 * Optimizer hyperparameters. `eps_inside_root` selects `sqrt(v + eps)`.
 */
typedef struct SrkitAdamWConfig {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  bool eps_inside_root;
} SrkitAdamWConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

const char *srkit_status_message(enum SrkitStatus status);

/**
 * Nearest-even bf16 bits of `x`.
 */
uint16_t srkit_round_nearest(float x);

float srkit_bf16_to_f32(uint16_t bits);

/**
 * Up-rounding probability; NaN for non-finite `x`.
 */
double srkit_sr_up_probability(float x);

enum SrkitStatus srkit_quant_grid(float x, struct SrkitQuantGrid *out);

struct SrkitRng *srkit_rng_new(uint64_t seed);

void srkit_rng_free(struct SrkitRng *rng);

/**
 * The 16-bit draw at `(stream, step, index)`; 0 for a null handle.
 */
uint16_t srkit_draw_u16(const struct SrkitRng *rng, uint64_t stream, uint64_t step, uint64_t index);

enum SrkitStatus srkit_round_stochastic(const struct SrkitRng *rng,
                                        float x,
                                        uint64_t stream,
                                        uint64_t step,
                                        uint64_t index,
                                        uint16_t *out);

/**
 * Creates an optimizer for `n_tensors` flat tensors of lengths `lens`,
 * drawing write-back randomness from `seed`. The constant learning rate is
 * `cfg.lr`.
 */
enum SrkitStatus srkit_optimizer_new(const struct SrkitAdamWConfig *cfg,
                                     enum SrkitPolicy policy,
                                     uint64_t seed,
                                     const size_t *lens,
                                     size_t n_tensors,
                                     struct SrkitOptimizer **out);

/**
 * One step over every tensor. `params[k]` and `grads[k]` point at
 * `lens[k]` floats; parameters are updated in place. Values are narrowed
 * to the policy's precisions on the way in. On error nothing changes.
 */
enum SrkitStatus srkit_optimizer_step(struct SrkitOptimizer *opt,
                                      float *const *params,
                                      const float *const *grads);

/**
 * Completed steps; 0 for a null handle.
 */
uint64_t srkit_optimizer_steps(const struct SrkitOptimizer *opt);

void srkit_optimizer_free(struct SrkitOptimizer *opt);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRKIT_H */
