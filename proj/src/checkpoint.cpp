#include "safecast/numeric/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace safecast {

namespace {

constexpr const char *kMagic = "SAFECAST-CHECKPOINT 1";

void put_le(std::ostream &os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char *>(buf), 8);
}

double get_le(std::istream &is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char *>(buf), 8)) {
    throw std::runtime_error("checkpoint payload truncated");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const Matrix *Checkpoint::find(const std::string &name) const {
  for (const auto &[n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << kMagic << '\n';
  for (const auto &[k, v] : ckpt.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint meta entries must be single tokens: " + k);
    }
    os << "meta " << k << ' ' << v << '\n';
  }
  for (const auto &[name, m] : ckpt.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) {
      throw std::invalid_argument("tensor name contains whitespace: " + name);
    }
    os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  }
  os << "payload\n";
  for (const auto &[name, m] : ckpt.tensors) {
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) put_le(os, m(r, c));
    }
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMagic) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  Checkpoint ckpt;
  std::vector<std::pair<Index, Index>> shapes;
  while (std::getline(is, line)) {
    if (line == "payload") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      ckpt.meta[k] = v;
    } else if (kind == "tensor") {
      std::string name;
      Index rows = -1, cols = -1;
      ls >> name >> rows >> cols;
      if (!ls || rows < 0 || cols < 0) {
        throw std::runtime_error("malformed checkpoint manifest line: " + line);
      }
      ckpt.tensors.emplace_back(name, Matrix(rows, cols));
    } else {
      throw std::runtime_error("unexpected checkpoint manifest line: " + line);
    }
  }
  if (line != "payload") throw std::runtime_error("checkpoint manifest has no payload marker");
  for (auto &[name, m] : ckpt.tensors) {
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = get_le(is);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("trailing bytes after checkpoint payload");
  }
  return ckpt;
}

void restore_parameters(const Checkpoint &ckpt, const std::vector<Parameter *> &params) {
  for (Parameter *p : params) {
    const Matrix *m = ckpt.find(p->name);
    if (m == nullptr) throw std::runtime_error("checkpoint lacks parameter '" + p->name + "'");
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
      throw DimensionError("checkpoint parameter '" + p->name + "' has shape " +
                           shape_string(*m) + ", model expects " + shape_string(p->value));
    }
    p->value = *m;
    p->zero_grad();
  }
}

void append_parameters(Checkpoint &ckpt, const std::vector<Parameter *> &params) {
  for (const Parameter *p : params) ckpt.tensors.emplace_back(p->name, p->value);
}

}  // namespace safecast
