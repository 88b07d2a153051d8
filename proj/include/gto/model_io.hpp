#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>

#include "gto/lm_core.hpp"

namespace gto {

// Text model file, version 1:
//
//   gto-model 1
//   kind tabular|softmax
//   vocab <V>
//   order <o>
//   pad <token>
//   steps <n>
//   values <rows*V>
//   <V hex-float values per line, row-major>
//
// Values are written as C99 hex floats so a save/load cycle is bit-exact.

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyModel = std::variant<TabularMarkovModel, LinearSoftmaxModel>;

void write_model(std::ostream& out, const TabularMarkovModel& model);
void write_model(std::ostream& out, const LinearSoftmaxModel& model);
AnyModel read_model(std::istream& in);

void save_model(const std::filesystem::path& path, const TabularMarkovModel& model);
void save_model(const std::filesystem::path& path, const LinearSoftmaxModel& model);
AnyModel load_model(const std::filesystem::path& path);

/// Loads a file that must hold a trainable drafter.
LinearSoftmaxModel load_softmax_model(const std::filesystem::path& path);
/// Loads any model as a ConditionalModel.
std::unique_ptr<ConditionalModel> load_conditional_model(const std::filesystem::path& path);

std::string format_hex(double v);
double parse_hex(const std::string& s);

}  // namespace gto
