#include "dvd/parameters.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace dvd {

void ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ValidationError("parameter '" + name + "' registered twice");
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

Index ParameterStore::count() const {
  Index n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

void ParameterStore::save(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const std::string file = names_[i] + ".dvdt";
    save_tensor(values_[i], dir / file);
    index[names_[i]] = {{"file", file}, {"shape", values_[i].shape()}};
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw ValidationError("cannot write " + (dir / "index.json").string());
  out << index.dump(2) << '\n';
}

ParameterStore ParameterStore::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw ValidationError("checkpoint index missing: " + (dir / "index.json").string());
  nlohmann::ordered_json index;
  try {
    index = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint index is not valid JSON: " + std::string(e.what()));
  }
  ParameterStore store;
  for (const auto& [name, entry] : index.items()) {
    Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
    const Shape shape = entry.at("shape").get<Shape>();
    if (t.shape() != shape) {
      throw ValidationError("parameter '" + name + "' has shape " + shape_string(t.shape()) + ", index says " +
                            shape_string(shape));
    }
    store.add(name, std::move(t));
  }
  return store;
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
  return a.names_ == b.names_ && a.values_ == b.values_;
}

BoundParameters::BoundParameters(Tape& tape, const ParameterStore& store, bool requires_grad) {
  for (const std::string& n : store.names()) vars_.emplace(n, tape.leaf(store.get(n), requires_grad));
}

BoundParameters::BoundParameters(const std::vector<std::string>& names, const std::vector<Var>& vars) {
  if (names.size() != vars.size()) throw ValidationError("BoundParameters: names and vars differ in count");
  for (std::size_t i = 0; i < names.size(); ++i) vars_.emplace(names[i], vars[i]);
}

const Var& BoundParameters::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ValidationError("parameter '" + name + "' is not bound");
  return it->second;
}

void Adam::step(ParameterStore& store, const BoundParameters& bound, const Tape& tape) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, var] : bound.vars()) {
    const Tensor g = tape.grad(var);
    Tensor& p = store.get(name);
    auto [mit, fresh] = m_.try_emplace(name, Tensor(p.shape(), 0.0));
    auto vit = v_.try_emplace(name, Tensor(p.shape(), 0.0)).first;
    (void)fresh;
    mit->second.data() = beta1_ * mit->second.data() + (1.0 - beta1_) * g.data();
    vit->second.data() = beta2_ * vit->second.data() + (1.0 - beta2_) * g.data().square();
    p.data() -= lr_ * (mit->second.data() / c1) / ((vit->second.data() / c2).sqrt() + eps_);
  }
}

Tensor init_uniform(const Shape& shape, double gain, std::mt19937_64& rng) {
  Index fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double a = gain * std::sqrt(3.0 / static_cast<double>(std::max<Index>(1, fan_in)));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace dvd
