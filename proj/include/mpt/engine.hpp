// Copyright 2026 The mpt Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode training engine with per-tensor rounding.
//
// One gradient computation rounds every tensor of the graph exactly once, at
// operator boundaries: the input, each weight copy, each operator output, the
// loss seed, each input gradient and each weight gradient. Operators compute
// internally in double precision. Master weights live in a separate copy that
// is rounded to its own format (fp32 unless configured otherwise) after each
// SGD update.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mpt/assign.hpp"
#include "mpt/errors.hpp"
#include "mpt/fpnum.hpp"
#include "mpt/graph.hpp"

namespace mpt {

/// One tensor per parameter, aligned with Graph::params().
using Weights = std::vector<std::vector<double>>;

/// Row-major examples. Targets are class indices for softmax cross-entropy
/// and real values for the l1 loss.
struct Dataset {
  std::size_t dim = 0;
  int classes = 0;
  std::vector<double> features;
  std::vector<double> targets;

  std::size_t size() const noexcept { return targets.size(); }
  std::span<const double> row(std::size_t k) const {
    return {features.data() + k * dim, dim};
  }
};

struct Batch {
  std::size_t size = 0;
  std::vector<double> inputs;
  std::vector<double> targets;
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> rows) {
  Batch b;
  b.size = rows.size();
  b.inputs.reserve(rows.size() * data.dim);
  for (std::size_t r : rows) {
    auto x = data.row(r);
    b.inputs.insert(b.inputs.end(), x.begin(), x.end());
    b.targets.push_back(data.targets[r]);
  }
  return b;
}

struct StepOptions {
  /// When set, the step also reports which rounding sites would produce a
  /// different value under the other level of this candidate.
  const PrecisionCandidate* probe = nullptr;
};

struct StepResult {
  /// Mean of the rounded per-example loss values.
  double loss = 0.0;
  /// Rounded weight gradients divided by loss_scale * batch size.
  Weights grads;
  /// Per rounding site, aligned with Graph::tensors().
  std::vector<OverflowStats> overflow;
  bool backward_overflow = false;
  std::size_t rounding_calls = 0;
  /// Filled only when StepOptions::probe is set.
  std::vector<bool> level_sensitive;
  /// Rounded input of the loss op, batch-major.
  std::vector<double> logits;
};

namespace detail {

class Executor {
 public:
  Executor(const Graph& g, std::span<const FpFormat> formats,
           const StepOptions& options, StepResult& result)
      : g_(g), formats_(formats), options_(options), result_(result) {
    if (!formats.empty() && formats.size() != g.tensor_count()) {
      throw ComputationError("format list does not cover the tensor set");
    }
    const int first = g.activations().front();
    first_ = first;
    acts_.resize(g.activations().size());
    grads_.resize(g.activations().size());
    result_.overflow.assign(g.tensor_count(), {});
    if (options_.probe != nullptr) {
      result_.level_sensitive.assign(g.tensor_count(), false);
    }
  }

  std::vector<double>& act(int i) { return acts_[i - first_]; }
  std::vector<double>& grad(int i) { return grads_[i - first_]; }

  void round_site(TensorId id, std::span<double> data) {
    if (formats_.empty()) return;
    const std::size_t pos = g_.position(id);
    if (options_.probe != nullptr) {
      const FpFormat& lo = options_.probe->lo_of[pos];
      const FpFormat& hi = options_.probe->hi_of[pos];
      for (double v : data) {
        if (!std::isfinite(v)) break;
        const double a = round_unchecked(lo, v).value;
        const double b = round_unchecked(hi, v).value;
        if (std::bit_cast<std::uint64_t>(a) != std::bit_cast<std::uint64_t>(b)) {
          result_.level_sensitive[pos] = true;
          break;
        }
      }
    }
    result_.overflow[pos] = round_in_place(formats_[pos], data);
    ++result_.rounding_calls;
  }

  void run(const Batch& batch, const Weights& weights, double loss_scale,
           bool backward) {
    const std::size_t bsz = batch.size;
    if (bsz == 0) throw ComputationError("empty batch");
    if (weights.size() != g_.params().size()) {
      throw ComputationError("weight list does not match the graph parameters");
    }
    const int in = g_.input_activation();
    if (batch.inputs.size() != bsz * g_.meta(x_(in)).size ||
        batch.targets.size() != bsz) {
      throw ComputationError("batch shape does not match the graph input");
    }

    act(in) = batch.inputs;
    round_site(x_(in), act(in));

    theta_hat_.resize(weights.size());
    for (std::size_t s = 0; s < weights.size(); ++s) {
      const int j = g_.params()[s];
      if (weights[s].size() != g_.meta(theta_(j)).size) {
        throw ComputationError("theta" + std::to_string(j) + " has wrong size");
      }
      theta_hat_[s] = weights[s];
      round_site(theta_(j), theta_hat_[s]);
    }

    for (const OpNode& op : g_.ops()) {
      forward(op, batch, bsz);
      for (int out : op.outputs) round_site(x_(out), act(out));
    }

    const int out = g_.output_activation();
    const auto& loss_values = act(out);
    result_.loss = std::accumulate(loss_values.begin(), loss_values.end(), 0.0) /
                   static_cast<double>(bsz);
    const OpNode& loss_op = g_.ops().back();
    result_.logits = act(loss_op.inputs.front());
    if (!backward) return;

    grad(out).assign(bsz, loss_scale);
    round_site(dx_(out), grad(out));

    result_.grads.assign(weights.size(), {});
    for (auto it = g_.ops().rbegin(); it != g_.ops().rend(); ++it) {
      backward_op(*it, batch, bsz);
    }

    result_.backward_overflow = false;
    if (!formats_.empty()) {
      for (std::size_t k = 0; k < g_.tensor_count(); ++k) {
        if (!is_forward(g_.tensors()[k].id.kind) &&
            result_.overflow[k].overflow_count > 0) {
          result_.backward_overflow = true;
        }
      }
    }
    const double unscale = loss_scale * static_cast<double>(bsz);
    for (auto& gr : result_.grads) {
      for (double& v : gr) v /= unscale;
    }
  }

 private:
  std::size_t size_of(int activation) const {
    return g_.meta(x_(activation)).size;
  }
  const std::vector<double>& theta_hat(int j) const {
    return theta_hat_[g_.param_slot(j)];
  }

  void forward(const OpNode& op, const Batch& batch, std::size_t bsz) {
    const int in = op.inputs.front();
    const std::vector<double>& x = act(in);
    const std::size_t in_size = size_of(in);
    switch (op.kind) {
      case OpKind::dense: {
        const auto& w = theta_hat(op.param);
        const std::size_t out_size = static_cast<std::size_t>(op.param_shape[0]);
        auto& y = act(op.outputs[0]);
        y.assign(bsz * out_size, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t o = 0; o < out_size; ++o) {
            double sum = 0.0;
            for (std::size_t i = 0; i < in_size; ++i) {
              sum += w[o * in_size + i] * x[b * in_size + i];
            }
            y[b * out_size + o] = sum;
          }
        }
        break;
      }
      case OpKind::conv2d:
        conv_forward(op, x, act(op.outputs[0]), bsz);
        break;
      case OpKind::relu: {
        auto& y = act(op.outputs[0]);
        y = x;
        for (double& v : y) v = v > 0.0 ? v : 0.0;
        break;
      }
      case OpKind::global_avg_pool: {
        const Shape& s = g_.activation_shape(in);
        const std::size_t c = s[0], hw = static_cast<std::size_t>(s[1]) * s[2];
        auto& y = act(op.outputs[0]);
        y.assign(bsz * c, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            double sum = 0.0;
            for (std::size_t k = 0; k < hw; ++k) sum += x[(b * c + ch) * hw + k];
            y[b * c + ch] = sum / static_cast<double>(hw);
          }
        }
        break;
      }
      case OpKind::softmax_cross_entropy: {
        auto& y = act(op.outputs[0]);
        y.assign(bsz, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          const auto label = static_cast<std::size_t>(batch.targets[b]);
          if (label >= in_size) throw ComputationError("class label out of range");
          const double* z = &x[b * in_size];
          const double zmax = *std::max_element(z, z + in_size);
          double denom = 0.0;
          for (std::size_t k = 0; k < in_size; ++k) denom += std::exp(z[k] - zmax);
          y[b] = std::log(denom) + zmax - z[label];
        }
        break;
      }
      case OpKind::split: {
        std::size_t offset = 0;
        for (int out : op.outputs) {
          const std::size_t n = size_of(out);
          auto& y = act(out);
          y.assign(bsz * n, 0.0);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < n; ++k) y[b * n + k] = x[b * in_size + offset + k];
          }
          offset += n;
        }
        break;
      }
      case OpKind::add: {
        auto& y = act(op.outputs[0]);
        y.assign(bsz, 0.0);
        for (int src : op.inputs) {
          const std::size_t n = size_of(src);
          const auto& v = act(src);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < n; ++k) y[b] += v[b * n + k];
          }
        }
        break;
      }
      case OpKind::scale: {
        auto& y = act(op.outputs[0]);
        if (op.has_params) {
          const auto& w = theta_hat(op.param);
          if (in_size != 1) throw ComputationError("scale expects a scalar input");
          y.assign(bsz * w.size(), 0.0);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < w.size(); ++k) y[b * w.size() + k] = x[b] * w[k];
          }
        } else {
          y = x;
          for (double& v : y) v *= op.factor;
        }
        break;
      }
      case OpKind::l1_loss: {
        if (in_size != 1) throw ComputationError("l1 loss expects a scalar input");
        auto& y = act(op.outputs[0]);
        y.assign(bsz, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          y[b] = op.factor * std::fabs(x[b] - batch.targets[b]);
        }
        break;
      }
    }
  }

  void conv_forward(const OpNode& op, const std::vector<double>& x,
                    std::vector<double>& y, std::size_t bsz) {
    const Shape& is = g_.activation_shape(op.inputs[0]);
    const Shape& os = g_.activation_shape(op.outputs[0]);
    const int C = is[0], H = is[1], W = is[2];
    const int O = os[0], OH = os[1], OW = os[2];
    const int K = op.kernel, S = op.stride, P = op.padding;
    const auto& w = theta_hat(op.param);
    y.assign(bsz * static_cast<std::size_t>(O) * OH * OW, 0.0);
    for (std::size_t b = 0; b < bsz; ++b) {
      const double* xb = &x[b * static_cast<std::size_t>(C) * H * W];
      double* yb = &y[b * static_cast<std::size_t>(O) * OH * OW];
      for (int o = 0; o < O; ++o) {
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
              for (int kh = 0; kh < K; ++kh) {
                const int ih = oh * S - P + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < K; ++kw) {
                  const int iw = ow * S - P + kw;
                  if (iw < 0 || iw >= W) continue;
                  sum += w[((o * C + c) * K + kh) * K + kw] * xb[(c * H + ih) * W + iw];
                }
              }
            }
            yb[(o * OH + oh) * OW + ow] = sum;
          }
        }
      }
    }
  }

  void conv_backward(const OpNode& op, const std::vector<double>& x,
                     const std::vector<double>& dy, std::vector<double>& dx,
                     std::vector<double>& dw, std::size_t bsz) {
    const Shape& is = g_.activation_shape(op.inputs[0]);
    const Shape& os = g_.activation_shape(op.outputs[0]);
    const int C = is[0], H = is[1], W = is[2];
    const int O = os[0], OH = os[1], OW = os[2];
    const int K = op.kernel, S = op.stride, P = op.padding;
    const auto& w = theta_hat(op.param);
    dx.assign(bsz * static_cast<std::size_t>(C) * H * W, 0.0);
    dw.assign(w.size(), 0.0);
    for (std::size_t b = 0; b < bsz; ++b) {
      const double* xb = &x[b * static_cast<std::size_t>(C) * H * W];
      double* dxb = &dx[b * static_cast<std::size_t>(C) * H * W];
      const double* dyb = &dy[b * static_cast<std::size_t>(O) * OH * OW];
      for (int o = 0; o < O; ++o) {
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            const double g = dyb[(o * OH + oh) * OW + ow];
            if (g == 0.0) continue;
            for (int c = 0; c < C; ++c) {
              for (int kh = 0; kh < K; ++kh) {
                const int ih = oh * S - P + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < K; ++kw) {
                  const int iw = ow * S - P + kw;
                  if (iw < 0 || iw >= W) continue;
                  const std::size_t wi = ((o * C + c) * K + kh) * K + kw;
                  dw[wi] += g * xb[(c * H + ih) * W + iw];
                  dxb[(c * H + ih) * W + iw] += g * w[wi];
                }
              }
            }
          }
        }
      }
    }
  }

  void finish_param_grad(const OpNode& op, std::vector<double> dw) {
    round_site(dtheta_(op.param), dw);
    result_.grads[g_.param_slot(op.param)] = std::move(dw);
  }

  void backward_op(const OpNode& op, const Batch& batch, std::size_t bsz) {
    const int in = op.inputs.front();
    const std::vector<double>& x = act(in);
    const std::size_t in_size = size_of(in);
    switch (op.kind) {
      case OpKind::dense: {
        const auto& w = theta_hat(op.param);
        const std::size_t out_size = static_cast<std::size_t>(op.param_shape[0]);
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        dx.assign(bsz * in_size, 0.0);
        std::vector<double> dw(w.size(), 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t o = 0; o < out_size; ++o) {
            const double g = dy[b * out_size + o];
            for (std::size_t i = 0; i < in_size; ++i) {
              dx[b * in_size + i] += w[o * in_size + i] * g;
              dw[o * in_size + i] += g * x[b * in_size + i];
            }
          }
        }
        round_site(dx_(in), dx);
        finish_param_grad(op, std::move(dw));
        return;
      }
      case OpKind::conv2d: {
        std::vector<double> dw;
        conv_backward(op, x, grad(op.outputs[0]), grad(in), dw, bsz);
        round_site(dx_(in), grad(in));
        finish_param_grad(op, std::move(dw));
        return;
      }
      case OpKind::relu: {
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        dx.resize(dy.size());
        for (std::size_t k = 0; k < dy.size(); ++k) dx[k] = x[k] > 0.0 ? dy[k] : 0.0;
        break;
      }
      case OpKind::global_avg_pool: {
        const Shape& s = g_.activation_shape(in);
        const std::size_t c = s[0], hw = static_cast<std::size_t>(s[1]) * s[2];
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        dx.assign(bsz * c * hw, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = dy[b * c + ch] / static_cast<double>(hw);
            for (std::size_t k = 0; k < hw; ++k) dx[(b * c + ch) * hw + k] = g;
          }
        }
        break;
      }
      case OpKind::softmax_cross_entropy: {
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        dx.assign(bsz * in_size, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          const auto label = static_cast<std::size_t>(batch.targets[b]);
          const double* z = &x[b * in_size];
          const double zmax = *std::max_element(z, z + in_size);
          double denom = 0.0;
          for (std::size_t k = 0; k < in_size; ++k) denom += std::exp(z[k] - zmax);
          for (std::size_t k = 0; k < in_size; ++k) {
            const double p = std::exp(z[k] - zmax) / denom;
            dx[b * in_size + k] = (p - (k == label ? 1.0 : 0.0)) * dy[b];
          }
        }
        break;
      }
      case OpKind::split: {
        auto& dx = grad(in);
        dx.assign(bsz * in_size, 0.0);
        std::size_t offset = 0;
        for (int out : op.outputs) {
          const std::size_t n = size_of(out);
          const auto& dy = grad(out);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < n; ++k) dx[b * in_size + offset + k] = dy[b * n + k];
          }
          offset += n;
        }
        break;
      }
      case OpKind::add: {
        const auto& dy = grad(op.outputs[0]);
        for (int src : op.inputs) {
          const std::size_t n = size_of(src);
          auto& dx = grad(src);
          dx.assign(bsz * n, 0.0);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < n; ++k) dx[b * n + k] = dy[b];
          }
          round_site(dx_(src), dx);
        }
        return;
      }
      case OpKind::scale: {
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        if (op.has_params) {
          const auto& w = theta_hat(op.param);
          dx.assign(bsz, 0.0);
          std::vector<double> dw(w.size(), 0.0);
          for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t k = 0; k < w.size(); ++k) {
              dx[b] += dy[b * w.size() + k] * w[k];
              dw[k] += dy[b * w.size() + k] * x[b];
            }
          }
          round_site(dx_(in), dx);
          finish_param_grad(op, std::move(dw));
          return;
        }
        dx = dy;
        for (double& v : dx) v *= op.factor;
        break;
      }
      case OpKind::l1_loss: {
        const auto& dy = grad(op.outputs[0]);
        auto& dx = grad(in);
        dx.assign(bsz, 0.0);
        for (std::size_t b = 0; b < bsz; ++b) {
          const double d = x[b] - batch.targets[b];
          const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
          dx[b] = op.factor * sign * dy[b];
        }
        break;
      }
    }
    round_site(dx_(in), grad(in));
  }

  const Graph& g_;
  std::span<const FpFormat> formats_;
  const StepOptions& options_;
  StepResult& result_;
  int first_ = 0;
  std::vector<std::vector<double>> acts_;
  std::vector<std::vector<double>> grads_;
  Weights theta_hat_;
};

}  // namespace detail

/// One rounded forward/backward pass. `formats` gives the format of every
/// tensor (aligned with Graph::tensors()); an empty span disables rounding.
inline StepResult forward_backward(const Graph& g, std::span<const FpFormat> formats,
                                   const Batch& batch, const Weights& weights,
                                   double loss_scale, const StepOptions& options = {}) {
  StepResult result;
  detail::Executor exec(g, formats, options, result);
  exec.run(batch, weights, loss_scale, /*backward=*/true);
  return result;
}

inline StepResult forward_backward(const Graph& g, const PrecisionAssignment& pi,
                                   const PrecisionCandidate& c, const Batch& batch,
                                   const Weights& weights, double loss_scale,
                                   const StepOptions& options = {}) {
  const std::vector<FpFormat> formats = resolve_formats(c, pi);
  return forward_backward(g, formats, batch, weights, loss_scale, options);
}

/// Forward pass only; backward fields of the result stay empty.
inline StepResult forward_only(const Graph& g, std::span<const FpFormat> formats,
                               const Batch& batch, const Weights& weights) {
  StepResult result;
  StepOptions options;
  detail::Executor exec(g, formats, options, result);
  exec.run(batch, weights, 1.0, /*backward=*/false);
  return result;
}

/// theta <- rnd_master(theta - lr * grad), in place.
inline void sgd_update(Weights& master, const Weights& grads, double lr,
                       const FpFormat& master_format = kFp32) {
  if (master.size() != grads.size()) {
    throw ComputationError("gradient list does not match the weights");
  }
  for (std::size_t s = 0; s < master.size(); ++s) {
    if (master[s].size() != grads[s].size()) {
      throw ComputationError("gradient shape does not match its weight");
    }
    for (std::size_t k = 0; k < master[s].size(); ++k) {
      master[s][k] = round(master_format, master[s][k] - lr * grads[s][k]).value;
    }
  }
}

inline Weights sgd_step(Weights master, const Weights& grads, double lr,
                        const FpFormat& master_format = kFp32) {
  sgd_update(master, grads, lr, master_format);
  return master;
}

struct LossScaleConfig {
  double growth_factor = 2.0;
  double backoff_factor = 0.5;
  long growth_interval_steps = 1;
};

struct LossScaleState {
  double scale = 65536.0;
  long steps_since_growth = 0;

  friend bool operator==(const LossScaleState&, const LossScaleState&) = default;
};

struct LossScaleUpdate {
  LossScaleState state;
  bool skip_step = false;
};

/// Dynamic loss scaling. An overflowing step backs off and is skipped; after
/// growth_interval_steps clean steps in a row the scale grows. Back-off takes
/// precedence when both are due.
inline LossScaleUpdate update_loss_scale(LossScaleState state, bool backward_overflow,
                                         const LossScaleConfig& cfg) {
  if (!(state.scale > 0.0)) throw DomainError("loss scale must be positive");
  if (backward_overflow) {
    state.scale *= cfg.backoff_factor;
    state.steps_since_growth = 0;
    return {state, true};
  }
  ++state.steps_since_growth;
  if (state.steps_since_growth >= cfg.growth_interval_steps) {
    state.scale *= cfg.growth_factor;
    state.steps_since_growth = 0;
  }
  return {state, false};
}

struct Promotion {
  long step = 0;
  TensorId tensor;

  friend bool operator==(const Promotion&, const Promotion&) = default;
};

/// Promotes to hi every low-precision forward tensor whose overflow ratio in
/// the last step exceeded theta. Backward tensors are never touched. Returns
/// the promoted tensors.
inline std::vector<TensorId> promote_overflowing(const Graph& g,
                                                 PrecisionAssignment& assignment,
                                                 std::span<const OverflowStats> stats,
                                                 double theta) {
  std::vector<TensorId> promoted;
  for (std::size_t k = 0; k < g.tensor_count(); ++k) {
    const TensorId id = g.tensors()[k].id;
    if (!is_forward(id.kind) || assignment.level_of[k] != Level::lo) continue;
    if (k < stats.size() && stats[k].ratio() > theta) {
      assignment.level_of[k] = Level::hi;
      promoted.push_back(id);
    }
  }
  return promoted;
}

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.05;
  double theta = 0.01;
  bool promotion_enabled = true;
  bool loss_scaling_enabled = true;
  double loss_scale_init = 65536.0;
  double growth_factor = 2.0;
  double backoff_factor = 0.5;
  /// Fraction of an epoch.
  double growth_interval = 1.0;
  std::uint64_t seed = 0;
  FpFormat master_format = kFp32;

  void validate() const {
    if (epochs < 1) throw DomainError("epochs must be >= 1");
    if (batch_size < 1) throw DomainError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw DomainError("learning rate must be > 0");
    if (!(theta > 0.0 && theta < 1.0)) throw DomainError("theta must lie in (0, 1)");
    if (!(loss_scale_init > 0.0)) throw DomainError("initial loss scale must be > 0");
    if (!(growth_factor >= 1.0)) throw DomainError("growth factor must be >= 1");
    if (!(backoff_factor > 0.0 && backoff_factor <= 1.0)) {
      throw DomainError("back-off factor must lie in (0, 1]");
    }
    if (!(growth_interval > 0.0)) throw DomainError("growth interval must be > 0");
    require_valid(master_format);
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_accuracy = 0.0;
  double eval_accuracy_fp32 = 0.0;
  double lrt_now = 0.0;
  double loss_scale_end = 0.0;
  int promotions_this_epoch = 0;
  int skipped_steps = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainState {
  Weights master_weights;
  PrecisionAssignment live_assignment;
  LossScaleState loss_scale;
  std::vector<OverflowStats> last_overflow;
  std::vector<Promotion> promotion_log;
  long step = 0;
};

struct TrainResult {
  Weights weights;
  std::vector<EpochRecord> epochs;
  PrecisionAssignment final_assignment;
  std::vector<Promotion> promotions;
  /// Mean over epochs of the end-of-epoch low-precision ratio.
  double mean_lrt = 0.0;
  double best_eval_accuracy = 0.0;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], rounded to `fmt`.
inline Weights init_weights(const Graph& g, std::uint64_t seed,
                            const FpFormat& fmt = kFp32) {
  std::mt19937_64 rng(seed);
  Weights w;
  for (int j : g.params()) {
    const TensorMeta& meta = g.meta(theta_(j));
    const std::size_t fan_in = meta.size / static_cast<std::size_t>(meta.shape[0]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> t(meta.size);
    for (double& v : t) v = round(fmt, dist(rng)).value;
    w.push_back(std::move(t));
  }
  return w;
}

/// Fraction of examples whose arg-max logit equals the label.
inline double classification_accuracy(const Graph& g, std::span<const FpFormat> formats,
                                      const Weights& weights, const Dataset& data,
                                      std::size_t chunk = 256) {
  if (data.size() == 0) return 0.0;
  const std::size_t classes = g.meta(x_(g.ops().back().inputs.front())).size;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    rows.clear();
    for (std::size_t r = start; r < std::min(data.size(), start + chunk); ++r) {
      rows.push_back(r);
    }
    const StepResult res = forward_only(g, formats, make_batch(data, rows), weights);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const double* z = &res.logits[b * classes];
      const auto pred = static_cast<std::size_t>(std::max_element(z, z + classes) - z);
      if (pred == static_cast<std::size_t>(data.targets[rows[b]])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Minibatch SGD with rounding, dynamic loss scaling and (optionally)
/// overflow-driven promotion. Each step: forward/backward, promotion check,
/// loss-scale update, then the weight update unless the step was skipped.
inline TrainResult train(const Graph& g, const PrecisionCandidate& c,
                         const PrecisionAssignment& initial, const TrainConfig& cfg,
                         const Dataset& train_set, const Dataset& eval_set) {
  cfg.validate();
  if (train_set.size() == 0) throw DomainError("training set is empty");
  if (g.ops().back().kind != OpKind::softmax_cross_entropy) {
    throw DomainError("training expects a softmax cross-entropy loss");
  }
  if (initial.level_of.size() != g.tensor_count() ||
      c.lo_of.size() != g.tensor_count()) {
    throw LookupError("assignment does not cover the tensor set");
  }

  TrainState state;
  state.master_weights = init_weights(g, cfg.seed, cfg.master_format);
  state.live_assignment = initial;
  state.loss_scale.scale = cfg.loss_scaling_enabled ? cfg.loss_scale_init : 1.0;

  const std::size_t steps_per_epoch =
      (train_set.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  LossScaleConfig scale_cfg{
      cfg.growth_factor, cfg.backoff_factor,
      std::max(1L, std::lround(cfg.growth_interval * static_cast<double>(steps_per_epoch)))};

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::vector<FpFormat> fp32_formats(g.tensor_count(), kFp32);

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::vector<FpFormat> formats = resolve_formats(c, state.live_assignment);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch batch = make_batch(
          train_set, std::span<const std::size_t>(order.data() + start, end - start));
      StepResult step = forward_backward(g, formats, batch, state.master_weights,
                                         state.loss_scale.scale);
      ++state.step;
      loss_sum += step.loss;

      if (cfg.promotion_enabled) {
        for (TensorId id : promote_overflowing(g, state.live_assignment, step.overflow,
                                               cfg.theta)) {
          state.promotion_log.push_back({state.step, id});
          ++rec.promotions_this_epoch;
        }
        formats = resolve_formats(c, state.live_assignment);
      }

      bool skip = false;
      if (cfg.loss_scaling_enabled) {
        const LossScaleUpdate upd =
            update_loss_scale(state.loss_scale, step.backward_overflow, scale_cfg);
        state.loss_scale = upd.state;
        skip = upd.skip_step;
      }
      if (skip) {
        ++rec.skipped_steps;
      } else {
        sgd_update(state.master_weights, step.grads, cfg.learning_rate,
                   cfg.master_format);
      }
      state.last_overflow = std::move(step.overflow);
    }
    rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    rec.eval_accuracy =
        classification_accuracy(g, formats, state.master_weights, eval_set);
    rec.eval_accuracy_fp32 =
        classification_accuracy(g, fp32_formats, state.master_weights, eval_set);
    rec.lrt_now = lrt(g, state.live_assignment);
    rec.loss_scale_end = state.loss_scale.scale;
    result.epochs.push_back(rec);
  }

  double lrt_sum = 0.0;
  for (const EpochRecord& r : result.epochs) {
    lrt_sum += r.lrt_now;
    result.best_eval_accuracy = std::max(result.best_eval_accuracy, r.eval_accuracy);
  }
  result.mean_lrt = lrt_sum / static_cast<double>(result.epochs.size());
  result.weights = std::move(state.master_weights);
  result.final_assignment = std::move(state.live_assignment);
  result.promotions = std::move(state.promotion_log);
  return result;
}

}  // namespace mpt
