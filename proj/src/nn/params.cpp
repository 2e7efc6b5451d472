#include "ivf/nn/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ivf/nn/adam.hpp"
#include "ivf/nn/gradcheck.hpp"

namespace ivf::nn {

template <class T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw InvalidArgument("ParamStore: duplicate parameter " + name);
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

template <class T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("ParamStore: unknown parameter " + name);
  return values_[it->second];
}

template <class T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("ParamStore: unknown parameter " + name);
  return values_[it->second];
}

template <class T>
std::size_t ParamStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

template <class T>
bool ParamStore<T>::same_layout(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].shape() != other.values_[i].shape()) return false;
  return true;
}

template <class T>
BoundParams<T>::BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool trainable)
    : tape_(&tape), store_(&store) {
  for (const auto& name : store.names())
    vars_.emplace(name, trainable ? tape.variable(store.get(name)) : tape.constant(store.get(name)));
}

template <class T>
const Var<T>& BoundParams<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw InvalidArgument("BoundParams: unknown parameter " + name);
  return it->second;
}

template <class T>
ParamStore<T> BoundParams<T>::gradients() const {
  ParamStore<T> out;
  for (const auto& name : store_->names()) {
    const Var<T>& v = vars_.at(name);
    if (tape_->requires_grad(v.id()) && tape_->has_grad(v.id()))
      out.add(name, tape_->grad(v.id()));
    else
      out.add(name, Tensor<T>(v.shape(), T(0)));
  }
  return out;
}

template <class T>
Tensor<T> kaiming_uniform(const Shape& shape, int fan_in, std::mt19937_64& rng, double gain_scale) {
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1)) * gain_scale;
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(dist(rng));
  return out;
}

template <class T>
std::uint64_t param_hash(const ParamStore<T>& store) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& name : store.names()) {
    mix(name.data(), name.size());
    const auto& t = store.get(name);
    for (int d : t.shape()) mix(&d, sizeof d);
    mix(t.data(), t.numel() * sizeof(T));
  }
  return h;
}

template <class T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& state, double lr,
               const AdamOptions& options) {
  if (!params.same_layout(grads)) throw InvalidArgument("adam_step: gradient layout differs from parameters");
  if (state.step == 0 && state.m.size() == 0) {
    for (const auto& name : params.names()) {
      state.m.add(name, Tensor<T>(params.get(name).shape(), T(0)));
      state.v.add(name, Tensor<T>(params.get(name).shape(), T(0)));
    }
  }
  if (!params.same_layout(state.m) || !params.same_layout(state.v))
    throw InvalidArgument("adam_step: optimizer state layout differs from parameters");
  ++state.step;
  const double b1 = options.beta1, b2 = options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& name : params.names()) {
    auto& p = params.get(name);
    const auto& g = grads.get(name);
    auto& m = state.m.get(name);
    auto& v = state.v.get(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + options.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

namespace {

template <class U>
void put(std::vector<std::uint8_t>& out, U value) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  // Host is assumed little-endian (checked by static_assert below).
  out.insert(out.end(), buf, buf + sizeof(U));
}

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <class U>
  U get(const char* what) {
    if (pos_ + sizeof(U) > bytes_.size()) throw IoError(std::string("checkpoint truncated reading ") + what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated reading name");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& store) {
  std::vector<std::uint8_t> out{'I', 'V', 'F', '1'};
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& name : store.names()) {
    if (name.size() > 0xFFFF) throw InvalidArgument("checkpoint: parameter name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto& t = store.get(name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (int d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) put<float>(out, v);
  }
  return out;
}

ParamStore<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  for (char expected : {'I', 'V', 'F', '1'})
    if (in.get<char>("magic") != expected) throw IoError("checkpoint: bad magic (expected IVF1)");
  const auto count = in.get<std::uint32_t>("array count");
  ParamStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>("name length");
    const std::string name = in.get_string(len);
    const auto rank = in.get<std::uint8_t>("rank");
    if (rank == 0 || rank > 4) throw IoError("checkpoint: invalid rank for " + name);
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(in.get<std::uint32_t>("dims")));
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = in.get<float>("payload");
    store.add(name, Tensor<float>(shape, std::move(data)));
  }
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  return store;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& store) {
  const auto bytes = encode_checkpoint(store);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ParamStore<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void check_layout(const ParamStore<float>& loaded, const ParamStore<float>& expected) {
  for (const auto& name : expected.names()) {
    if (!loaded.contains(name)) throw ConfigError("checkpoint: missing parameter " + name);
    const auto& want = expected.get(name).shape();
    const auto& got = loaded.get(name).shape();
    if (want != got)
      throw ConfigError("checkpoint: parameter " + name + " has shape " + shape_string(got) +
                        " but the configuration expects " + shape_string(want));
  }
  for (const auto& name : loaded.names())
    if (!expected.contains(name)) throw ConfigError("checkpoint: unexpected parameter " + name);
}

ParamStore<float> load_checkpoint(const std::filesystem::path& path, const ParamStore<float>& expected_layout) {
  ParamStore<float> loaded = load_checkpoint(path);
  check_layout(loaded, expected_layout);
  ParamStore<float> ordered;
  for (const auto& name : expected_layout.names()) ordered.add(name, loaded.get(name));
  return ordered;
}

namespace {

double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& loss, const ParamStore<double>& params, double eps, double floor) {
  ParamStore<double> analytic;
  {
    Tape<double> tape;
    BoundParams<double> bound(tape, params, true);
    auto l = loss(tape, bound);
    tape.backward(l);
    analytic = bound.gradients();
  }
  auto evaluate = [&](const ParamStore<double>& p) {
    Tape<double> tape;
    BoundParams<double> bound(tape, p, false);
    return loss(tape, bound).value()[0];
  };
  GradCheckResult result;
  ParamStore<double> probe = params;
  for (const auto& name : params.names()) {
    auto& t = probe.get(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + eps;
      const double fp = evaluate(probe);
      t[i] = orig - eps;
      const double fm = evaluate(probe);
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic.get(name)[i];
      const double err = rel_error(a, numeric, floor);
      ++result.checked;
      if (result.worst.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = name + "[" + std::to_string(i) + "]";
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           double eps, double floor) {
  ParamStore<double> store;
  store.add("x", x);
  return grad_check([&f](Tape<double>&, const BoundParams<double>& p) { return f(p["x"]); }, store, eps, floor);
}

template class ParamStore<float>;
template class ParamStore<double>;
template class BoundParams<float>;
template class BoundParams<double>;
template Tensor<float> kaiming_uniform(const Shape&, int, std::mt19937_64&, double);
template Tensor<double> kaiming_uniform(const Shape&, int, std::mt19937_64&, double);
template std::uint64_t param_hash(const ParamStore<float>&);
template std::uint64_t param_hash(const ParamStore<double>&);
template void adam_step(ParamStore<float>&, const ParamStore<float>&, AdamState<float>&, double, const AdamOptions&);
template void adam_step(ParamStore<double>&, const ParamStore<double>&, AdamState<double>&, double,
                        const AdamOptions&);

}  // namespace ivf::nn
