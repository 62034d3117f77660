#include "dfmad/params.hpp"

#include "dfmad/error.hpp"

namespace dfmad {

void ParameterRegistry::add(std::string name, const Var& var, bool trainable)
{
    entries_.push_back({std::move(name), var->value.numel(), trainable, var});
}

void ParameterRegistry::add_count(std::string name, std::size_t numel, bool trainable)
{
    entries_.push_back({std::move(name), numel, trainable, nullptr});
}

void ParameterRegistry::append(const ParameterRegistry& other, const std::string& prefix)
{
    for (const auto& e : other.entries_) {
        entries_.push_back({prefix + e.name, e.numel, e.trainable, e.var});
    }
}

std::size_t ParameterRegistry::total_count() const noexcept
{
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.numel;
    }
    return n;
}

std::size_t ParameterRegistry::trainable_count() const noexcept
{
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) {
            n += e.numel;
        }
    }
    return n;
}

std::vector<Var> ParameterRegistry::trainable_vars() const
{
    std::vector<Var> out;
    for (const auto& e : entries_) {
        if (e.trainable && e.var) {
            out.push_back(e.var);
        }
    }
    return out;
}

std::vector<Var> ParameterRegistry::frozen_vars() const
{
    std::vector<Var> out;
    for (const auto& e : entries_) {
        if (!e.trainable && e.var) {
            out.push_back(e.var);
        }
    }
    return out;
}

double trainable_fraction(const ParameterRegistry& registry)
{
    if (registry.empty() || registry.total_count() == 0) {
        throw ContractError("trainable_fraction: empty parameter registry");
    }
    return static_cast<double>(registry.trainable_count()) / static_cast<double>(registry.total_count());
}

} // namespace dfmad
