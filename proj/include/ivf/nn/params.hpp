#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ivf/nn/tape.hpp"

namespace ivf::nn {

// Ordered collection of named parameter arrays.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t total_elements() const;

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& n : names_) out.add(n, get(n).template cast<U>());
    return out;
  }

  bool same_layout(const ParamStore& other) const;

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::map<std::string, std::size_t> index_;
};

// Parameters placed on a tape, either as gradient leaves or as constants.
template <class T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool trainable);

  const Var<T>& operator[](const std::string& name) const;
  Tape<T>& tape() const { return *tape_; }

  // Gradients collected after backward; zeros where no gradient reached.
  ParamStore<T> gradients() const;

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  std::map<std::string, Var<T>> vars_;
};

// Kaiming-uniform initialisation, bound = sqrt(6 / fan_in) * gain_scale.
template <class T>
Tensor<T> kaiming_uniform(const Shape& shape, int fan_in, std::mt19937_64& rng, double gain_scale = 1.0);

// FNV-1a over names, shapes, and raw payload bytes.
template <class T>
std::uint64_t param_hash(const ParamStore<T>& store);

// Little-endian container: "IVF1", u32 count, then per array u16 name length, name bytes,
// u8 rank, u32 dims, f32 payload.
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& store);
ParamStore<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& store);
ParamStore<float> load_checkpoint(const std::filesystem::path& path);
// Loads and verifies names and shapes against an expected layout.
ParamStore<float> load_checkpoint(const std::filesystem::path& path, const ParamStore<float>& expected_layout);
void check_layout(const ParamStore<float>& loaded, const ParamStore<float>& expected_layout);

}  // namespace ivf::nn
