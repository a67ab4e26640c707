#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "memt5/error.hpp"
#include "memt5/rng.hpp"
#include "memt5/tensor.hpp"

namespace memt5 {

// Named parameter store. Initialization is derived from (seed, name), so the
// values do not depend on the order in which tensors are registered.
template <typename S>
class ParamRegistry {
  public:
    explicit ParamRegistry(uint64_t seed = 0) : seed_(seed) {}

    Tensor<S>& add_trunc_normal(const std::string& name, Shape shape, double stddev) {
        RngStream rng(seed_, name, 0);
        auto t = Tensor<S>::zeros(shape, true);
        for (auto& v : t.data()) v = S(rng.trunc_normal(stddev));
        return insert(name, std::move(t));
    }

    Tensor<S>& add_const(const std::string& name, Shape shape, S value) {
        auto t = Tensor<S>::filled(std::move(shape), value, true);
        return insert(name, std::move(t));
    }

    Tensor<S>& get(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<S>& get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return map_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& name : names_) n += map_.at(name).numel();
        return n;
    }

    void zero_grads() {
        for (const auto& name : names_) map_.at(name).zero_grad();
    }

  private:
    Tensor<S>& insert(const std::string& name, Tensor<S> t) {
        auto [it, fresh] = map_.emplace(name, std::move(t));
        if (!fresh) throw ConfigError("duplicate parameter: " + name);
        names_.push_back(name);
        return it->second;
    }

    uint64_t seed_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, Tensor<S>> map_;
};

}  // namespace memt5
