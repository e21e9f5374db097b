#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "timesbert/tensor.hpp"

namespace timesbert {

/// Learnable tensors addressable by stable names, kept in insertion order so
/// iteration (optimizer updates, checkpoint records) is deterministic.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, std::move(t));
        return entries_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second].second;
    }

    void remove_prefix(const std::string& prefix) {
        std::vector<std::pair<std::string, Tensor>> kept;
        for (auto& e : entries_)
            if (e.first.rfind(prefix, 0) != 0) kept.push_back(std::move(e));
        entries_ = std::move(kept);
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].first, i);
    }

    std::size_t size() const { return entries_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad() {
        for (auto& e : entries_) e.second.drop_grad();
    }

    // Deep copy; the result shares no storage with this store.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, t] : entries_) {
            Tensor c = t.clone();
            c.drop_grad();
            out.add(name, c);
            out.get(name).set_requires_grad(t.requires_grad());
        }
        return out;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace timesbert
