#include "visreview/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kernels.hpp"
#include "visreview/error.hpp"

namespace vr {

const Tensor& Var::value() const {
  if (!tape_) fail(ErrorCode::InvalidArgument, "value() on an unbound Var");
  return tape_->value(id_);
}

Tensor Gradients::operator[](Var v) const {
  if (const Tensor* g = find(v.id())) return *g;
  return zeros_like(v.value());
}

const Tensor* Gradients::find(std::size_t id) const {
  if (id >= grads_.size() || !grads_[id]) return nullptr;
  return &*grads_[id];
}

const Tensor& BackwardContext::value(std::size_t id) const { return tape_.value(id); }

bool BackwardContext::needs_grad(std::size_t id) const { return tape_.requires_grad(id); }

Tensor& BackwardContext::grad(std::size_t id) {
  auto& slot = grads_.grads_[id];
  if (!slot) slot = zeros_like(tape_.value(id));
  return *slot;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  Var v = variable(p.value);
  params_.emplace(&p, v.id());
  return v;
}

std::optional<std::size_t> Tape::param_node(const Parameter& p) const {
  if (auto it = params_.find(&p); it != params_.end()) return it->second;
  return std::nullopt;
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs});
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape() != this) fail(ErrorCode::InvalidArgument, "loss was recorded on a different tape");
  if (value(loss.id()).size() != 1) {
    fail(ErrorCode::NonScalarLoss, "backward needs a scalar loss, got " + value(loss.id()).shape_string());
  }
  Gradients grads;
  grads.tape_ = this;
  grads.grads_.resize(nodes_.size());
  grads.visit_counts_.assign(nodes_.size(), 0);
  grads.grads_[loss.id()] = ones_like(value(loss.id()));
  BackwardContext ctx(*this, grads);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.backward || !grads.grads_[id]) continue;
    // The output gradient is moved out so input accumulation cannot alias it.
    Tensor out = std::move(*grads.grads_[id]);
    ctx.grad_out_ = &out;
    node.backward(ctx);
    grads.grads_[id] = std::move(out);
    ++grads.visit_counts_[id];
    ++grads.visited_;
  }
  return grads;
}

Gradients backward(Var loss) {
  if (!loss.valid()) fail(ErrorCode::InvalidArgument, "backward on an unbound Var");
  return loss.tape()->backward(loss);
}

std::vector<Tensor> parameter_gradients(const Tape& tape, const Gradients& grads,
                                        std::span<Parameter* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) {
    const auto node = tape.param_node(*p);
    const Tensor* g = node ? grads.find(*node) : nullptr;
    out.push_back(g ? *g : zeros_like(p->value));
  }
  return out;
}

namespace {

Tape& common_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) fail(ErrorCode::InvalidArgument, "operands live on different tapes");
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + " of " + a.value().shape_string() + " and " +
                                       b.value().shape_string());
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BackwardContext& ctx) {
    const Tensor& av = ctx.value(ia);
    const Tensor& bv = ctx.value(ib);
    const Tensor& g = ctx.grad_output();
    const std::size_t m = av.dim(0), k = av.dim(1);
    const std::size_t n = bv.rank() == 2 ? bv.dim(1) : 1;
    if (ctx.needs_grad(ia)) {
      double* da = ctx.grad(ia).raw();
      if (n == 1) {
        for (std::size_t i = 0; i < m; ++i) detail::axpy(g[i], bv.raw(), da + i * k, k);
      } else {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) da[i * k + p] += detail::dot(g.raw() + i * n, bv.raw() + p * n, n);
      }
    }
    if (ctx.needs_grad(ib)) {
      double* db = ctx.grad(ib).raw();
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = av.raw() + i * k;
        if (n == 1) {
          detail::axpy(g[i], arow, db, k);
          continue;
        }
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = arow[p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av_ip * g[i * n + j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  Tensor out = transpose(a.value());
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](BackwardContext& ctx) {
    accumulate(ctx.grad(ia), transpose(ctx.grad_output()));
  });
}

Var add(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BackwardContext& ctx) {
    if (ctx.needs_grad(ia)) accumulate(ctx.grad(ia), ctx.grad_output());
    if (ctx.needs_grad(ib)) accumulate(ctx.grad(ib), ctx.grad_output());
  });
}

Var sub(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(ia)) accumulate(ctx.grad(ia), g);
    if (ctx.needs_grad(ib)) {
      Tensor& db = ctx.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(ia)) {
      Tensor& da = ctx.grad(ia);
      const Tensor& bv = ctx.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (ctx.needs_grad(ib)) {
      Tensor& db = ctx.grad(ib);
      const Tensor& av = ctx.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, factor](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& da = ctx.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor::scalar(total), {ia}, [ia](BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    for (auto& v : ctx.grad(ia).data()) v += g;
  });
}

Var reshape(Var a, Tensor::Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](BackwardContext& ctx) {
    Tensor& da = ctx.grad(ia);
    const Tensor& g = ctx.grad_output();
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

Var stack(std::span<const Var> rows) {
  if (rows.empty()) fail(ErrorCode::EmptySequence, "stack of zero rows");
  Tape& tape = *rows.front().tape();
  const Tensor::Shape& row_shape = rows.front().shape();
  if (row_shape.size() != 1) fail(ErrorCode::DimensionMismatch, "stack expects vectors");
  const std::size_t width = row_shape[0];
  Tensor out({rows.size(), width});
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].tape() != &tape) fail(ErrorCode::InvalidArgument, "operands live on different tapes");
    if (rows[r].shape() != row_shape) fail(ErrorCode::ShapeMismatch, "stack rows differ in length");
    std::copy_n(rows[r].value().raw(), width, out.raw() + r * width);
    ids.push_back(rows[r].id());
  }
  auto captured = ids;
  return tape.record(std::move(out), std::move(ids), [captured = std::move(captured), width](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    for (std::size_t r = 0; r < captured.size(); ++r) {
      if (!ctx.needs_grad(captured[r])) continue;
      double* dr = ctx.grad(captured[r]).raw();
      for (std::size_t j = 0; j < width; ++j) dr[j] += g[r * width + j];
    }
  });
}

Var add_rowwise(Var m, Var v) {
  Tape& tape = common_tape(m, v);
  if (m.value().rank() != 2 || v.value().rank() != 1 || m.value().dim(1) != v.value().dim(0)) {
    fail(ErrorCode::DimensionMismatch, "add_rowwise of " + m.value().shape_string() + " and " +
                                           v.value().shape_string());
  }
  const std::size_t rows = m.value().dim(0), cols = m.value().dim(1);
  Tensor out = m.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += v.value()[c];
  const std::size_t im = m.id(), iv = v.id();
  return tape.record(std::move(out), {im, iv}, [im, iv, rows, cols](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(im)) accumulate(ctx.grad(im), g);
    if (ctx.needs_grad(iv)) {
      Tensor& dv = ctx.grad(iv);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dv[c] += g[r * cols + c];
    }
  });
}

Var add_channel_bias(Var x, Var b) {
  Tape& tape = common_tape(x, b);
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || b.value().rank() != 1 || b.value().dim(0) != xv.dim(0)) {
    fail(ErrorCode::DimensionMismatch, "add_channel_bias of " + xv.shape_string() + " and " +
                                           b.value().shape_string());
  }
  const std::size_t channels = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  Tensor out = xv;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += b.value()[c];
  const std::size_t ix = x.id(), ib = b.id();
  return tape.record(std::move(out), {ix, ib}, [ix, ib, channels, plane](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    if (ctx.needs_grad(ix)) accumulate(ctx.grad(ix), g);
    if (ctx.needs_grad(ib)) {
      Tensor& db = ctx.grad(ib);
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
        db[c] += acc;
      }
    }
  });
}

Var conv2d(Var x, Var kernels, int stride) {
  Tape& tape = common_tape(x, kernels);
  Tensor out = conv2d(x.value(), kernels.value(), stride);
  const std::size_t ix = x.id(), ik = kernels.id();
  return tape.record(std::move(out), {ix, ik}, [ix, ik, stride](BackwardContext& ctx) {
    Tensor* dx = ctx.needs_grad(ix) ? &ctx.grad(ix) : nullptr;
    Tensor* dk = ctx.needs_grad(ik) ? &ctx.grad(ik) : nullptr;
    conv2d_backward(ctx.value(ix), ctx.value(ik), stride, ctx.grad_output(), dx, dk);
  });
}

Var avg_pool2d(Var x, int window, int stride) {
  Tensor out = avg_pool2d(x.value(), window, stride);
  const std::size_t ix = x.id();
  const auto win = static_cast<std::size_t>(window);
  const auto s = static_cast<std::size_t>(stride);
  return x.tape()->record(std::move(out), {ix}, [ix, win, s](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.grad(ix);
    const std::size_t c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const std::size_t oh = g.dim(1), ow = g.dim(2);
    const double scale = 1.0 / static_cast<double>(win * win);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double gv = g[(ci * oh + oy) * ow + ox] * scale;
          for (std::size_t ky = 0; ky < win; ++ky)
            for (std::size_t kx = 0; kx < win; ++kx) dx[(ci * h + oy * s + ky) * w + ox * s + kx] += gv;
        }
  });
}

Var global_avg_pool(Var x) {
  Tensor out = global_avg_pool(x.value());
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.grad(ix);
    const std::size_t c = dx.dim(0), plane = dx.dim(1) * dx.dim(2);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < plane; ++i) dx[ci * plane + i] += g[ci] * inv;
  });
}

Var concat(Var a, Var b, std::size_t axis) {
  Tape& tape = common_tape(a, b);
  Tensor out = concat(a.value(), b.value(), axis);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, axis](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& av = ctx.value(ia);
    const Tensor& bv = ctx.value(ib);
    if (bv.empty()) {
      if (ctx.needs_grad(ia)) accumulate(ctx.grad(ia), g);
      return;
    }
    if (av.empty()) {
      if (ctx.needs_grad(ib)) accumulate(ctx.grad(ib), g);
      return;
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
    for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
    const std::size_t ablock = av.dim(axis) * inner, bblock = bv.dim(axis) * inner;
    double* da = ctx.needs_grad(ia) ? ctx.grad(ia).raw() : nullptr;
    double* db = ctx.needs_grad(ib) ? ctx.grad(ib).raw() : nullptr;
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = g.raw() + o * (ablock + bblock);
      if (da)
        for (std::size_t i = 0; i < ablock; ++i) da[o * ablock + i] += src[i];
      if (db)
        for (std::size_t i = 0; i < bblock; ++i) db[o * bblock + i] += src[ablock + i];
    }
  });
}

Var elementwise(Elementwise kind, Var x) {
  Tensor out = elementwise(kind, x.value());
  const std::size_t ix = x.id();
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {ix}, [ix, self, kind](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.value(self);
    const Tensor& xv = ctx.value(ix);
    Tensor& dx = ctx.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Elementwise::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case Elementwise::tanh: d = 1.0 - y[i] * y[i]; break;
        case Elementwise::relu: d = xv[i] > 0.0 ? 1.0 : 0.0; break;
      }
      dx[i] += g[i] * d;
    }
  });
}

Var sigmoid(Var x) { return elementwise(Elementwise::sigmoid, x); }
Var tanh(Var x) { return elementwise(Elementwise::tanh, x); }
Var relu(Var x) { return elementwise(Elementwise::relu, x); }

Var mish(Var x) {
  Tensor out = mish(x.value());
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& xv = ctx.value(ix);
    Tensor& dx = ctx.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mish_derivative(xv[i]);
  });
}

Var softmax(Var x) {
  Tensor out = softmax(x.value());
  const std::size_t ix = x.id();
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {ix}, [ix, self](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& y = ctx.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    Tensor& dx = ctx.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += y[i] * (g[i] - dot);
  });
}

Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  auto mask = std::make_shared<const std::vector<double>>(dropout_mask(x.value().size(), rate, mode, rng));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, mask](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (*mask)[i];
  });
}

Var cross_entropy(const Tensor& target, Var predicted) {
  const double loss = cross_entropy(target, predicted.value());
  std::size_t hot = 0;
  while (target[hot] != 1.0) ++hot;
  const std::size_t ip = predicted.id();
  return predicted.tape()->record(Tensor::scalar(loss), {ip}, [ip, hot](BackwardContext& ctx) {
    const double p = ctx.value(ip)[hot];
    // d/dp of -log(max(p, floor)); the clamp has zero slope below the floor.
    if (p > kProbabilityFloor && p <= 1.0) ctx.grad(ip)[hot] -= ctx.grad_output()[0] / p;
  });
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var loss = f(tape, xv);
    analytic = tape.backward(loss)[xv];
  }
  auto eval = [&](const Tensor& point) {
    Tape tape;
    return f(tape, tape.variable(point)).value().item();
  };
  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric);
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
    ++result.coordinates;
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                                  double eps, std::size_t max_per_tensor, std::uint64_t sample_seed) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    analytic = parameter_gradients(tape, tape.backward(loss), params);
  }
  auto eval = [&] {
    Tape tape;
    return f(tape).value().item();
  };
  GradCheckResult result;
  Rng rng(sample_seed, 0x67726164);
  std::size_t flat_index = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = params[pi]->value;
    std::vector<std::size_t> coords(value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_per_tensor && coords.size() > max_per_tensor) {
      rng.shuffle(coords);
      coords.resize(max_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = eval();
      value[i] = saved - eps;
      const double down = eval();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[pi][i], numeric);
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_index = flat_index + i;
        result.worst_analytic = analytic[pi][i];
        result.worst_numeric = numeric;
      }
      ++result.coordinates;
    }
    flat_index += value.size();
  }
  return result;
}

}  // namespace vr
