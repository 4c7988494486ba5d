#pragma once

// Named parameter storage, grouped for staged training, plus the per-graph
// binder that exposes parameters as autograd leaves.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtcolor/autograd.hpp"

namespace mtcolor {

enum class ParamGroup { backbone, guidance, condition };

inline const char* to_string(ParamGroup g) {
    switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::guidance: return "guidance";
    case ParamGroup::condition: return "condition";
    }
    return "?";
}

inline ParamGroup param_group_from_string(const std::string& s) {
    if (s == "backbone") return ParamGroup::backbone;
    if (s == "guidance") return ParamGroup::guidance;
    if (s == "condition") return ParamGroup::condition;
    throw InvalidArgument("unknown parameter group '" + s + "'");
}

template <typename T>
struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::backbone;
    Shape shape;
    std::vector<T> value;
};

template <typename T>
class ParamStore {
public:
    Parameter<T>& add(const std::string& name, ParamGroup group, Shape shape, std::vector<T> value) {
        if (index_.count(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
        if (value.size() != shape_numel(shape)) throw DimensionMismatch("parameter '" + name + "' init size");
        index_[name] = params_.size();
        params_.push_back({name, group, std::move(shape), std::move(value)});
        return params_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
        return it->second;
    }
    Parameter<T>& at(const std::string& name) { return params_[index_of(name)]; }
    const Parameter<T>& at(const std::string& name) const { return params_[index_of(name)]; }
    Parameter<T>& operator[](std::size_t i) { return params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
    std::size_t size() const { return params_.size(); }
    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }

    std::size_t count_values(std::set<ParamGroup> groups = {ParamGroup::backbone, ParamGroup::guidance,
                                                            ParamGroup::condition}) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (groups.count(p.group)) n += p.value.size();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_)
            out.add(p.name, p.group, p.shape, std::vector<U>(p.value.begin(), p.value.end()));
        return out;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Binds parameters of one store into a single graph. Parameters in a
// trainable group become gradient-carrying leaves; the rest are constants.
template <typename T>
class Binder {
public:
    explicit Binder(const ParamStore<T>& store, std::set<ParamGroup> trainable = {})
        : store_(&store), trainable_(std::move(trainable)) {}

    ag::Var<T> operator()(const std::string& name) {
        const std::size_t i = store_->index_of(name);
        auto it = bound_.find(i);
        if (it != bound_.end()) return it->second;
        const auto& p = (*store_)[i];
        auto v = ag::Var<T>::borrowed(p.shape, p.value.data(), trainable_.count(p.group) > 0);
        bound_.emplace(i, v);
        return v;
    }

    bool has(const std::string& name) const { return store_->contains(name); }
    const ParamStore<T>& store() const { return *store_; }

    // Gradients of every bound trainable parameter, by store index.
    const std::map<std::size_t, ag::Var<T>>& bound() const { return bound_; }

private:
    const ParamStore<T>* store_;
    std::set<ParamGroup> trainable_;
    std::map<std::size_t, ag::Var<T>> bound_;
};

namespace init {

template <typename T, typename Rng>
std::vector<T> normal(std::size_t n, double stddev, Rng& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(nd(rng));
    return v;
}

// He-style normal init for a weight with the given fan-in.
template <typename T, typename Rng>
std::vector<T> fan_in(std::size_t n, int fan, Rng& rng, double gain = 1.0) {
    return normal<T>(n, gain / std::sqrt(static_cast<double>(std::max(fan, 1))), rng);
}

template <typename T>
std::vector<T> constant(std::size_t n, T v) {
    return std::vector<T>(n, v);
}

} // namespace init

} // namespace mtcolor
