#include "nis/neural_iterator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "nis/error.hpp"

namespace nis {

// ---------------------------------------------------------------------------
// CorrectionStack

CorrectionStack::CorrectionStack(std::vector<ConvLayer> layers) : layers_(std::move(layers)) {
  check_chain();
}

void CorrectionStack::check_chain() const {
  if (layers_.empty()) throw ShapeMismatch("correction stack needs at least one layer");
  if (layers_.front().in_channels() != 1)
    throw ShapeMismatch("first correction layer must take one input channel");
  if (layers_.back().out_channels() != 1)
    throw ShapeMismatch("last correction layer must produce one output channel");
  for (std::size_t l = 1; l < layers_.size(); ++l) {
    if (layers_[l].in_channels() != layers_[l - 1].out_channels()) {
      std::ostringstream os;
      os << "correction layer " << l << " expects " << layers_[l].in_channels()
         << " channels but layer " << l - 1 << " produces " << layers_[l - 1].out_channels();
      throw ShapeMismatch(os.str());
    }
  }
  for (const auto& layer : layers_)
    for (double w : layer.weights())
      if (!std::isfinite(w)) throw InvalidArgument("correction kernels must be finite");
}

namespace {

std::vector<ConvLayer> layer_shapes(std::size_t depth, std::size_t width) {
  if (depth == 0) throw InvalidArgument("correction depth must be at least 1");
  if (width == 0) throw InvalidArgument("correction width must be at least 1");
  std::vector<ConvLayer> layers;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t in = l == 0 ? 1 : width;
    const std::size_t out = l + 1 == depth ? 1 : width;
    layers.emplace_back(out, in);
  }
  return layers;
}

}  // namespace

CorrectionStack CorrectionStack::zeros(std::size_t depth, std::size_t width) {
  return CorrectionStack(layer_shapes(depth, width));
}

CorrectionStack CorrectionStack::initialized(std::size_t depth, std::size_t width,
                                             std::mt19937_64& rng) {
  auto layers = layer_shapes(depth, width);
  std::uniform_real_distribution<double> dist(-0.1, 0.1);
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    for (double& w : layers[l].weights()) w = dist(rng);
  return CorrectionStack(std::move(layers));
}

CorrectionStack CorrectionStack::random(std::size_t depth, std::size_t width,
                                        std::mt19937_64& rng, double scale) {
  auto layers = layer_shapes(depth, width);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& layer : layers)
    for (double& w : layer.weights()) w = dist(rng);
  return CorrectionStack(std::move(layers));
}

std::size_t CorrectionStack::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weights().size();
  return n;
}

bool CorrectionStack::is_zero() const noexcept {
  return std::all_of(layers_.begin(), layers_.end(), [](const ConvLayer& l) {
    return std::all_of(l.weights().begin(), l.weights().end(), [](double w) { return w == 0.0; });
  });
}

CorrectionStack CorrectionStack::zeros_like() const {
  std::vector<ConvLayer> layers;
  for (const auto& l : layers_) layers.emplace_back(l.out_channels(), l.in_channels());
  return CorrectionStack(std::move(layers));
}

Field CorrectionStack::apply(const Field& f) const {
  const Grid2D& g = f.grid();
  std::vector<double> cur(f.values().begin(), f.values().end());
  std::vector<double> next;
  for (const auto& layer : layers_) {
    next.assign(layer.out_channels() * g.size(), 0.0);
    conv_forward(layer, g, cur, next);
    std::swap(cur, next);
  }
  return Field(g, std::move(cur));
}

Field CorrectionStack::adjoint(const Field& f) const {
  const Grid2D& g = f.grid();
  std::vector<double> cur(f.values().begin(), f.values().end());
  std::vector<double> next;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    next.assign(it->in_channels() * g.size(), 0.0);
    conv_backward_input(*it, g, cur, next);
    std::swap(cur, next);
  }
  return Field(g, std::move(cur));
}

Field CorrectionStack::apply_cached(const Field& f,
                                    std::vector<std::vector<double>>& layer_inputs) const {
  const Grid2D& g = f.grid();
  layer_inputs.resize(layers_.size());
  layer_inputs[0].assign(f.values().begin(), f.values().end());
  std::vector<double> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    out.assign(layers_[l].out_channels() * g.size(), 0.0);
    conv_forward(layers_[l], g, layer_inputs[l], out);
    if (l + 1 < layers_.size()) layer_inputs[l + 1] = out;
  }
  return Field(g, std::move(out));
}

Field CorrectionStack::backward(const std::vector<std::vector<double>>& layer_inputs,
                                const Field& grad_out, CorrectionStack& grad) const {
  const Grid2D& g = grad_out.grid();
  if (layer_inputs.size() != layers_.size() || grad.layers_.size() != layers_.size())
    throw ShapeMismatch("correction backward: cache does not match stack");
  std::vector<double> cur(grad_out.values().begin(), grad_out.values().end());
  std::vector<double> next;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    conv_backward_weights(layers_[l], g, layer_inputs[l], cur, grad.layers_[l]);
    next.assign(layers_[l].in_channels() * g.size(), 0.0);
    conv_backward_input(layers_[l], g, cur, next);
    std::swap(cur, next);
  }
  return Field(g, std::move(cur));
}

std::vector<CorrectionStack> embed_off_diag_stencils(const PdeProblem& problem, std::size_t depth,
                                                     std::size_t width) {
  std::vector<CorrectionStack> out;
  for (const auto& term : problem.terms) {
    if (term.op.radius() != 1)
      throw InvalidArgument("stencil embedding supports 3x3 stencils only (got width " +
                            std::to_string(term.op.width()) + ")");
    auto layers = layer_shapes(depth, width);
    const StencilOp off = term.op.off_diagonal();
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx)
        layers[0].at(0, 0, ky, kx) = off.weight(static_cast<int>(kx) - 1, static_cast<int>(ky) - 1);
    for (std::size_t l = 1; l < layers.size(); ++l) layers[l].at(0, 0, 1, 1) = 1.0;
    out.emplace_back(std::move(layers));
  }
  return out;
}

// ---------------------------------------------------------------------------
// FusedCorrection: the composed stacks written as position-class stencils.
//
// A depth-L stack of zero-padded 3x3 convolutions equals a single (2L+1)^2
// stencil at every node at least L-1 nodes away from the edge. Closer nodes
// see truncated intermediate activations; there are 2(L-1)+1 such classes
// per axis and each gets its own effective stencil.

class FusedCorrection {
 public:
  FusedCorrection(const SemiImplicitIterator& base, const std::vector<CorrectionStack>& stacks);

  static bool supported(const Grid2D& grid, const std::vector<CorrectionStack>& stacks);

  void apply(const Field& w, Field& out) const;

 private:
  using Kernel = std::vector<double>;  // (2R+1)^2, row-major in dy

  int class_code(int i, int n) const {
    if (i < band_) return i;
    if (i > n - 1 - band_) return band_ + 1 + (n - 1 - i);
    return band_;
  }
  int representative(int code, int n) const {
    if (code < band_) return code;
    if (code == band_) return n / 2;  // full window inside the grid
    return n - 1 - (code - band_ - 1);
  }
  std::size_t class_index(int cx, int cy) const {
    return static_cast<std::size_t>(cy * classes_ + cx);
  }
  void apply_kernels(const std::vector<Kernel>& kernels, const double* w, double* out) const;

  Grid2D grid_;
  BoundaryMask mask_;
  int radius_ = 0;
  int band_ = 0;
  int classes_ = 0;
  bool merged_ = false;
  std::vector<std::vector<Kernel>> term_kernels_;  // [term][class]
  std::vector<Field> weights_;                     // used when not merged
};

bool FusedCorrection::supported(const Grid2D& grid, const std::vector<CorrectionStack>& stacks) {
  std::size_t depth = 0;
  for (const auto& s : stacks) depth = std::max(depth, s.depth());
  const std::size_t need = 2 * depth + 1;
  return !stacks.empty() && grid.nx() >= need && grid.ny() >= need;
}

FusedCorrection::FusedCorrection(const SemiImplicitIterator& base,
                                 const std::vector<CorrectionStack>& stacks)
    : grid_(base.grid()), mask_(base.problem().mask) {
  std::size_t depth = 0;
  for (const auto& s : stacks) depth = std::max(depth, s.depth());
  radius_ = static_cast<int>(depth);
  band_ = radius_ - 1;
  classes_ = 2 * band_ + 1;
  const int nx = static_cast<int>(grid_.nx());
  const int ny = static_cast<int>(grid_.ny());
  const int win = 2 * radius_ + 1;

  // Merge terms when every weight field is constant over the interior.
  const auto& weights = base.term_weights();
  std::vector<double> constant(weights.size(), 0.0);
  merged_ = true;
  for (std::size_t t = 0; t < weights.size() && merged_; ++t) {
    bool first = true;
    for (std::size_t i = 0; i < weights[t].size(); ++i) {
      if (!mask_.interior(i)) continue;
      if (first) {
        constant[t] = weights[t][i];
        first = false;
      } else if (weights[t][i] != constant[t]) {
        merged_ = false;
        break;
      }
    }
  }

  const std::size_t nclasses = static_cast<std::size_t>(classes_ * classes_);
  std::vector<std::vector<Kernel>> per_term(stacks.size(),
                                            std::vector<Kernel>(nclasses, Kernel(win * win, 0.0)));
  Field impulse(grid_);
  for (int cy = 0; cy < classes_; ++cy) {
    for (int cx = 0; cx < classes_; ++cx) {
      const int px = representative(cx, nx);
      const int py = representative(cy, ny);
      const std::size_t node = grid_.index(px, py);
      impulse[node] = 1.0;
      for (std::size_t t = 0; t < stacks.size(); ++t) {
        const Field row = stacks[t].adjoint(impulse);  // row `node` of H_t
        Kernel& k = per_term[t][class_index(cx, cy)];
        for (int dy = -radius_; dy <= radius_; ++dy)
          for (int dx = -radius_; dx <= radius_; ++dx) {
            const int sx = px + dx, sy = py + dy;
            if (sx < 0 || sx >= nx || sy < 0 || sy >= ny) continue;
            k[(dy + radius_) * win + (dx + radius_)] = row.at(sx, sy);
          }
      }
      impulse[node] = 0.0;
    }
  }

  if (merged_) {
    std::vector<Kernel> total(nclasses, Kernel(win * win, 0.0));
    for (std::size_t t = 0; t < per_term.size(); ++t)
      for (std::size_t c = 0; c < nclasses; ++c)
        for (std::size_t j = 0; j < total[c].size(); ++j)
          total[c][j] += constant[t] * per_term[t][c][j];
    term_kernels_.push_back(std::move(total));
  } else {
    term_kernels_ = std::move(per_term);
    weights_ = weights;
  }
}

namespace {

// out(ix, iy) = sum k(dx, dy) w(ix + dx, iy + dy) over [r, n - r) in both axes,
// where the whole window lies inside the grid. Four outputs per register block.
template <int R>
void conv_full_window(const double* k, const double* w, double* out, int nx, int ny) {
  constexpr int win = 2 * R + 1;
  for (int iy = R; iy < ny - R; ++iy) {
    double* o = out + static_cast<std::ptrdiff_t>(iy) * nx;
    int ix = R;
    for (; ix + 4 <= nx - R; ix += 4) {
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      for (int dy = -R; dy <= R; ++dy) {
        const double* src = w + static_cast<std::ptrdiff_t>(iy + dy) * nx + ix - R;
        const double* kr = k + (dy + R) * win;
        for (int j = 0; j < win; ++j) {
          const double kv = kr[j];
          a0 += kv * src[j];
          a1 += kv * src[j + 1];
          a2 += kv * src[j + 2];
          a3 += kv * src[j + 3];
        }
      }
      o[ix] = a0;
      o[ix + 1] = a1;
      o[ix + 2] = a2;
      o[ix + 3] = a3;
    }
    for (; ix < nx - R; ++ix) {
      double a = 0.0;
      for (int dy = -R; dy <= R; ++dy) {
        const double* src = w + static_cast<std::ptrdiff_t>(iy + dy) * nx + ix - R;
        const double* kr = k + (dy + R) * win;
        for (int j = 0; j < win; ++j) a += kr[j] * src[j];
      }
      o[ix] = a;
    }
  }
}

void conv_full_window(int r, const double* k, const double* w, double* out, int nx, int ny) {
  switch (r) {
    case 1: return conv_full_window<1>(k, w, out, nx, ny);
    case 2: return conv_full_window<2>(k, w, out, nx, ny);
    case 3: return conv_full_window<3>(k, w, out, nx, ny);
    case 4: return conv_full_window<4>(k, w, out, nx, ny);
    default: break;
  }
  const int win = 2 * r + 1;
  for (int iy = r; iy < ny - r; ++iy)
    for (int ix = r; ix < nx - r; ++ix) {
      double a = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          a += k[(dy + r) * win + dx + r] * w[static_cast<std::ptrdiff_t>(iy + dy) * nx + ix + dx];
      out[static_cast<std::ptrdiff_t>(iy) * nx + ix] = a;
    }
}

}  // namespace

void FusedCorrection::apply_kernels(const std::vector<Kernel>& kernels, const double* w,
                                    double* out) const {
  const int nx = static_cast<int>(grid_.nx());
  const int ny = static_cast<int>(grid_.ny());
  const int win = 2 * radius_ + 1;

  // Nodes whose whole window is inside the grid use the interior stencil.
  conv_full_window(radius_, kernels[class_index(band_, band_)].data(), w, out, nx, ny);
  const int ylo = radius_, yhi = ny - radius_;
  const int xlo = radius_, xhi = nx - radius_;

  // Edge band: per-node class stencils (masked nodes are zeroed later).
  const auto m = mask_.values();
  auto edge_node = [&](int ix, int iy) {
    const std::size_t node = static_cast<std::size_t>(iy) * nx + ix;
    if (!m[node]) return;
    const Kernel& k = kernels[class_index(class_code(ix, nx), class_code(iy, ny))];
    const int dy0 = std::max(-radius_, -iy), dy1 = std::min(radius_, ny - 1 - iy);
    const int dx0 = std::max(-radius_, -ix), dx1 = std::min(radius_, nx - 1 - ix);
    double s = 0.0;
    for (int dy = dy0; dy <= dy1; ++dy) {
      const double* kr = k.data() + (dy + radius_) * win + radius_;
      const double* src = w + static_cast<std::ptrdiff_t>(iy + dy) * nx + ix;
      for (int dx = dx0; dx <= dx1; ++dx) s += kr[dx] * src[dx];
    }
    out[node] = s;
  };
  for (int iy = 0; iy < ny; ++iy) {
    if (iy < ylo || iy >= yhi) {
      for (int ix = 0; ix < nx; ++ix) edge_node(ix, iy);
    } else {
      for (int ix = 0; ix < xlo; ++ix) edge_node(ix, iy);
      for (int ix = xhi; ix < nx; ++ix) edge_node(ix, iy);
    }
  }
}

void FusedCorrection::apply(const Field& w, Field& out) const {
  require_same_grid(grid_, w.grid(), "fused correction");
  if (merged_) {
    apply_kernels(term_kernels_[0], w.data(), out.data());
  } else {
    out.fill(0.0);
    std::vector<double> tmp(grid_.size());
    for (std::size_t t = 0; t < term_kernels_.size(); ++t) {
      apply_kernels(term_kernels_[t], w.data(), tmp.data());
      const Field& wt = weights_[t];
      for (std::size_t i = 0; i < tmp.size(); ++i) out[i] += wt[i] * tmp[i];
    }
  }
  const auto m = mask_.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!m[i]) out[i] = 0.0;
}

// ---------------------------------------------------------------------------
// NeuralIterator

NeuralIterator::NeuralIterator(SemiImplicitIterator base, std::vector<CorrectionStack> corrections)
    : base_(std::move(base)),
      corrections_(std::make_shared<const std::vector<CorrectionStack>>(std::move(corrections))) {
  if (corrections_->size() != base_.term_count()) {
    std::ostringstream os;
    os << "neural iterator: " << corrections_->size() << " corrections for "
       << base_.term_count() << " PDE terms";
    throw ShapeMismatch(os.str());
  }
}

NeuralIterator NeuralIterator::with_previous_state(const Field& u_t) const {
  NeuralIterator out = *this;
  out.base_ = base_.with_previous_state(u_t);
  return out;
}

Field NeuralIterator::correction(const Field& w) const {
  Field out(grid());
  if (fused_) {
    fused_->apply(w, out);
    return out;
  }
  const auto& weights = base_.term_weights();
  for (std::size_t t = 0; t < corrections_->size(); ++t) {
    const auto& stack = (*corrections_)[t];
    if (stack.is_zero()) continue;
    const Field h = stack.apply(w);
    const Field& wt = weights[t];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wt[i] * h[i];
  }
  const auto m = base_.problem().mask.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!m[i]) out[i] = 0.0;
  return out;
}

Field NeuralIterator::correction_adjoint(const Field& v) const {
  require_same_grid(grid(), v.grid(), "correction adjoint");
  const auto m = base_.problem().mask.values();
  const auto& weights = base_.term_weights();
  Field out(grid());
  Field scaled(grid());
  for (std::size_t t = 0; t < corrections_->size(); ++t) {
    const auto& stack = (*corrections_)[t];
    if (stack.is_zero()) continue;
    for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = m[i] ? weights[t][i] * v[i] : 0.0;
    out += stack.adjoint(scaled);
  }
  return out;
}

Field NeuralIterator::apply(const Field& u, ApplyCounts* counts) const {
  Field p(grid());
  base_.apply_into(u, p);
  Field w = p;
  w -= u;
  const Field corr = correction(w);
  if (counts) {
    ++counts->base_passes;
    ++counts->correction_passes;
  }
  p += corr;
  return p;
}

Field NeuralIterator::homogeneous_apply(const Field& v) const {
  Field tv = base_.homogeneous_apply(v);
  Field d = tv;
  d -= v;
  tv += correction(d);
  return tv;
}

Field NeuralIterator::homogeneous_adjoint(const Field& v) const {
  // T'^T = T^T + (T^T - I) M^T
  const Field m = correction_adjoint(v);
  Field out = base_.homogeneous_adjoint(v + m);
  out -= m;
  return out;
}

spectral::LinearMap NeuralIterator::homogeneous_map() const {
  auto self = *this;
  return spectral::LinearMap{grid(), [self](const Field& v) { return self.homogeneous_apply(v); },
                             [self](const Field& v) { return self.homogeneous_adjoint(v); }};
}

NeuralIterator NeuralIterator::compiled() const {
  NeuralIterator out = *this;
  if (FusedCorrection::supported(grid(), *corrections_))
    out.fused_ = std::make_shared<const FusedCorrection>(base_, *corrections_);
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

using nlohmann::json;
constexpr const char* kModelFormat = "nis-correction-model";
constexpr int kModelVersion = 1;

json stencil_to_json(const StencilOp& op) {
  return json{{"name", op.name()},
              {"order", op.order()},
              {"radius", op.radius()},
              {"kernel", std::vector<double>(op.kernel().begin(), op.kernel().end())}};
}

StencilOp stencil_from_json(const json& j) {
  return StencilOp(j.at("kernel").get<std::vector<double>>(), j.at("radius").get<std::size_t>(),
                   j.at("order").get<int>(), j.value("name", std::string{}));
}

json layer_to_json(const ConvLayer& layer) {
  json w = json::array();
  for (std::size_t o = 0; o < layer.out_channels(); ++o) {
    json per_in = json::array();
    for (std::size_t i = 0; i < layer.in_channels(); ++i) {
      json rows = json::array();
      for (std::size_t ky = 0; ky < 3; ++ky) {
        json row = json::array();
        for (std::size_t kx = 0; kx < 3; ++kx) row.push_back(layer.at(o, i, ky, kx));
        rows.push_back(std::move(row));
      }
      per_in.push_back(std::move(rows));
    }
    w.push_back(std::move(per_in));
  }
  return json{{"out_channels", layer.out_channels()},
              {"in_channels", layer.in_channels()},
              {"kernel_size", 3},
              {"weights", std::move(w)}};
}

ConvLayer layer_from_json(const json& j) {
  const auto out = j.at("out_channels").get<std::size_t>();
  const auto in = j.at("in_channels").get<std::size_t>();
  if (j.at("kernel_size").get<int>() != 3) throw ShapeMismatch("only 3x3 kernels are supported");
  const json& w = j.at("weights");
  ConvLayer layer(out, in);
  if (!w.is_array() || w.size() != out) throw ShapeMismatch("weights: wrong out_channels extent");
  for (std::size_t o = 0; o < out; ++o) {
    if (!w[o].is_array() || w[o].size() != in)
      throw ShapeMismatch("weights: wrong in_channels extent");
    for (std::size_t i = 0; i < in; ++i) {
      if (!w[o][i].is_array() || w[o][i].size() != 3) throw ShapeMismatch("weights: not 3x3");
      for (std::size_t ky = 0; ky < 3; ++ky) {
        if (!w[o][i][ky].is_array() || w[o][i][ky].size() != 3)
          throw ShapeMismatch("weights: not 3x3");
        for (std::size_t kx = 0; kx < 3; ++kx) layer.at(o, i, ky, kx) = w[o][i][ky][kx].get<double>();
      }
    }
  }
  return layer;
}

}  // namespace

CorrectionModel make_model(const PdeProblem& problem, std::vector<CorrectionStack> corrections) {
  CorrectionModel m;
  m.grid_nx = problem.grid.nx();
  m.grid_ny = problem.grid.ny();
  m.grid_dx = problem.grid.dx();
  for (const auto& t : problem.terms) m.stencils.push_back(t.op);
  m.corrections = std::move(corrections);
  if (m.corrections.size() != m.stencils.size())
    throw ShapeMismatch("model: correction count does not match term count");
  return m;
}

std::string serialize_model(const CorrectionModel& model) {
  json terms = json::array();
  for (const auto& s : model.stencils) terms.push_back(stencil_to_json(s));
  json corrections = json::array();
  for (const auto& c : model.corrections) {
    json layers = json::array();
    for (const auto& l : c.layers()) layers.push_back(layer_to_json(l));
    corrections.push_back(json{{"layers", std::move(layers)}});
  }
  json doc{{"format", kModelFormat},
           {"version", kModelVersion},
           {"fingerprint",
            {{"grid", {{"nx", model.grid_nx}, {"ny", model.grid_ny}, {"dx", model.grid_dx}}},
             {"term_count", model.stencils.size()},
             {"terms", std::move(terms)}}},
           {"corrections", std::move(corrections)}};
  return doc.dump(1) + "\n";
}

CorrectionModel deserialize_model(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kModelFormat)
      throw ParseError("model: unexpected format tag");
    if (doc.at("version").get<int>() != kModelVersion)
      throw ParseError("model: unsupported version " + doc.at("version").dump());
    CorrectionModel m;
    const json& fp = doc.at("fingerprint");
    m.grid_nx = fp.at("grid").at("nx").get<std::size_t>();
    m.grid_ny = fp.at("grid").at("ny").get<std::size_t>();
    m.grid_dx = fp.at("grid").at("dx").get<double>();
    for (const auto& t : fp.at("terms")) m.stencils.push_back(stencil_from_json(t));
    if (fp.at("term_count").get<std::size_t>() != m.stencils.size())
      throw ShapeMismatch("model: term_count disagrees with stencil list");
    for (const auto& c : doc.at("corrections")) {
      std::vector<ConvLayer> layers;
      for (const auto& l : c.at("layers")) layers.push_back(layer_from_json(l));
      m.corrections.emplace_back(std::move(layers));
    }
    if (m.corrections.size() != m.stencils.size())
      throw ShapeMismatch("model: correction count does not match term count");
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model: ") + e.what());
  }
}

void check_compatible(const CorrectionModel& model, const PdeProblem& problem) {
  if (model.stencils.size() != problem.terms.size()) {
    std::ostringstream os;
    os << "model has " << model.stencils.size() << " terms but the problem has "
       << problem.terms.size()
       << "; a trained correction transfers only across problems sharing its stencils";
    throw ShapeMismatch(os.str());
  }
  for (std::size_t i = 0; i < model.stencils.size(); ++i) {
    const auto& a = model.stencils[i];
    const auto& b = problem.terms[i].op;
    if (a.radius() != b.radius() || a.order() != b.order() ||
        !std::equal(a.kernel().begin(), a.kernel().end(), b.kernel().begin())) {
      throw ShapeMismatch("model stencil " + std::to_string(i) +
                          " differs from the problem's; a trained correction transfers only "
                          "across problems sharing its stencils");
    }
  }
}

CorrectionModel deserialize_model(std::string_view text, const PdeProblem& problem) {
  CorrectionModel m = deserialize_model(text);
  check_compatible(m, problem);
  return m;
}

}  // namespace nis
