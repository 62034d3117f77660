#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dfmad/autodiff.hpp"

namespace dfmad {

struct ParameterEntry {
    std::string name;
    std::size_t numel = 0;
    bool trainable = false;
    Var var; // null for entries produced by counting alone
};

// Flat list of named parameters with their frozen/trainable status. Shared
// tensors must be registered once.
class ParameterRegistry {
public:
    void add(std::string name, const Var& var, bool trainable);
    void add_count(std::string name, std::size_t numel, bool trainable);
    void append(const ParameterRegistry& other, const std::string& prefix = "");

    const std::vector<ParameterEntry>& entries() const noexcept { return entries_; }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t total_count() const noexcept;
    std::size_t trainable_count() const noexcept;
    std::vector<Var> trainable_vars() const;
    std::vector<Var> frozen_vars() const;

private:
    std::vector<ParameterEntry> entries_;
};

// Trainable element count divided by total element count.
double trainable_fraction(const ParameterRegistry& registry);

} // namespace dfmad
