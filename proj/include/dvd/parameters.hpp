#pragma once

// Named trainable tensors, their binding to a tape, checkpoint I/O and Adam.

#include "dvd/autodiff.hpp"

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace dvd {

class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  /// Names in insertion order.
  const std::vector<std::string>& names() const { return names_; }
  Index count() const;

  /// Directory of <name>.dvdt files plus index.json {name → {file, shape}}.
  void save(const std::filesystem::path& dir) const;
  static ParameterStore load(const std::filesystem::path& dir);

  friend bool operator==(const ParameterStore& a, const ParameterStore& b);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters registered as leaves of one tape.
class BoundParameters {
 public:
  BoundParameters() = default;
  BoundParameters(Tape& tape, const ParameterStore& store, bool requires_grad = true);
  /// Binds already recorded vars, paired with `names` by position.
  BoundParameters(const std::vector<std::string>& names, const std::vector<Var>& vars);
  const Var& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

class Adam {
 public:
  explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  /// Applies one update using the gradients of the tape's last backward().
  void step(ParameterStore& store, const BoundParameters& bound, const Tape& tape);
  Index steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Index t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Uniform(−a, a) with a = gain·sqrt(3 / fan_in), fan_in = prod(shape[1:]).
Tensor init_uniform(const Shape& shape, double gain, std::mt19937_64& rng);

}  // namespace dvd
