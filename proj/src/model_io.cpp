#include "gto/model_io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <system_error>

namespace gto {

namespace {

constexpr const char* kMagic = "gto-model";
constexpr int kVersion = 1;

template <typename Model>
void write_common(std::ostream& out, const Model& model, const char* kind, std::uint64_t steps,
                  const std::vector<double>& values) {
  out << kMagic << ' ' << kVersion << '\n'
      << "kind " << kind << '\n'
      << "vocab " << model.vocab_size() << '\n'
      << "order " << model.order() << '\n'
      << "pad " << model.pad_token() << '\n'
      << "steps " << steps << '\n'
      << "values " << values.size() << '\n';
  const auto v = static_cast<std::size_t>(model.vocab_size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << format_hex(values[i]) << ((i + 1) % v == 0 ? '\n' : ' ');
  }
  if (!out) throw std::runtime_error("model write failed");
}

template <typename T>
T expect_field(std::istream& in, const std::string& key) {
  std::string got;
  T value{};
  if (!(in >> got) || got != key || !(in >> value)) {
    throw ModelFormatError("model file: expected field '" + key + "'");
  }
  return value;
}

}  // namespace

std::string format_hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  if (res.ec != std::errc{}) throw std::runtime_error("format_hex failed");
  return std::string(buf, res.ptr);
}

double parse_hex(const std::string& s) {
  // to_chars(hex) omits the 0x prefix; accept it anyway for hand-written files.
  std::string_view body(s);
  bool negative = false;
  if (!body.empty() && body.front() == '-') {
    negative = true;
    body.remove_prefix(1);
  }
  if (body.starts_with("0x") || body.starts_with("0X")) body.remove_prefix(2);
  double v = 0.0;
  auto res = std::from_chars(body.data(), body.data() + body.size(), v, std::chars_format::hex);
  if (res.ec != std::errc{} || res.ptr != body.data() + body.size()) {
    throw ModelFormatError("model file: bad hex float '" + s + "'");
  }
  return negative ? -v : v;
}

void write_model(std::ostream& out, const TabularMarkovModel& model) {
  write_common(out, model, "tabular", 0, model.table());
}

void write_model(std::ostream& out, const LinearSoftmaxModel& model) {
  write_common(out, model, "softmax", model.steps(), model.logits());
}

AnyModel read_model(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kMagic) {
    throw ModelFormatError("model file: missing gto-model header");
  }
  if (version != kVersion) {
    throw ModelFormatError("model file: unsupported version " + std::to_string(version));
  }
  const auto kind = expect_field<std::string>(in, "kind");
  const auto vocab = expect_field<int>(in, "vocab");
  const auto order = expect_field<int>(in, "order");
  const auto pad = expect_field<Token>(in, "pad");
  const auto steps = expect_field<std::uint64_t>(in, "steps");
  const auto count = expect_field<std::size_t>(in, "values");
  if (count > (std::size_t{1} << 28)) throw ModelFormatError("model file: implausible size");

  std::vector<double> values;
  values.reserve(count);
  std::string tok;
  for (std::size_t i = 0; i < count; ++i) {
    if (!(in >> tok)) throw ModelFormatError("model file: truncated values");
    values.push_back(parse_hex(tok));
  }
  try {
    if (kind == "tabular") return TabularMarkovModel(vocab, order, pad, std::move(values));
    if (kind == "softmax") return LinearSoftmaxModel(vocab, order, pad, std::move(values), steps);
  } catch (const std::domain_error& e) {
    throw ModelFormatError(std::string("model file: ") + e.what());
  }
  throw ModelFormatError("model file: unknown kind '" + kind + "'");
}

void save_model(const std::filesystem::path& path, const TabularMarkovModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_model(out, model);
}

void save_model(const std::filesystem::path& path, const LinearSoftmaxModel& model) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_model(out, model);
}

AnyModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_model(in);
}

LinearSoftmaxModel load_softmax_model(const std::filesystem::path& path) {
  auto any = load_model(path);
  if (auto* m = std::get_if<LinearSoftmaxModel>(&any)) return std::move(*m);
  throw ModelFormatError(path.string() + " does not hold a softmax drafter");
}

std::unique_ptr<ConditionalModel> load_conditional_model(const std::filesystem::path& path) {
  return std::visit(
      [](auto&& m) -> std::unique_ptr<ConditionalModel> {
        return std::make_unique<std::decay_t<decltype(m)>>(std::move(m));
      },
      load_model(path));
}

}  // namespace gto
