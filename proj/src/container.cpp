#include "ibg/container.hpp"

#include <bit>
#include <cstring>
#include <vector>

namespace ibg {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; raw scalar writes assume an LE host");

namespace {

constexpr char kModelMagic[9] = "IBGMODEL";
constexpr uint32_t kModelVersion = 1;

using RowMajorMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

uint8_t kind_code(LayerKind k) { return static_cast<uint8_t>(k); }

LayerKind kind_from_code(uint8_t c, const std::string& path) {
  check(c <= static_cast<uint8_t>(LayerKind::ResidualAdd),
        path + ": unknown layer kind code " + std::to_string(int(c)));
  return static_cast<LayerKind>(c);
}

// In-table matrix slots per layer, in serialization order.
std::vector<const Mat*> layer_mats(const Layer& L) {
  std::vector<const Mat*> out;
  switch (L.kind) {
    case LayerKind::Linear:
    case LayerKind::Unembed:
    case LayerKind::ResidualConcat:
    case LayerKind::ResidualAdd:
      out = {&L.w};
      break;
    case LayerKind::Activation:
    case LayerKind::LayerNormIn:
    case LayerKind::LayerNormOut:
      break;
    case LayerKind::Embed:
      out = {&L.tok_table, &L.pos_table};
      break;
    case LayerKind::AttentionBlock:
      for (const Mat& m : L.wq) out.push_back(&m);
      for (const Mat& m : L.wk) out.push_back(&m);
      for (const Mat& m : L.wv) out.push_back(&m);
      out.push_back(&L.wo);
      break;
  }
  return out;
}

std::vector<Mat*> layer_mats_mut(Layer& L) {
  std::vector<Mat*> out;
  for (const Mat* m : layer_mats(L)) out.push_back(const_cast<Mat*>(m));
  return out;
}

}  // namespace

BinWriter::BinWriter(const std::string& path) : path_(path) {
  out_.open(path, std::ios::binary | std::ios::trunc);
  check_cfg(out_.good(), "cannot open " + path + " for writing");
}

void BinWriter::raw(const void* data, size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void BinWriter::u8(uint8_t v) { raw(&v, 1); }
void BinWriter::u32(uint32_t v) { raw(&v, 4); }
void BinWriter::i64(int64_t v) { raw(&v, 8); }
void BinWriter::f64(double v) { raw(&v, 8); }

void BinWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void BinWriter::mat(const Mat& m) {
  i64(m.rows());
  i64(m.cols());
  RowMajorMat rm = m;
  raw(rm.data(), sizeof(double) * static_cast<size_t>(rm.size()));
}

void BinWriter::close() {
  out_.flush();
  check(out_.good(), "write failure on " + path_);
  out_.close();
}

BinReader::BinReader(const std::string& path) : path_(path) {
  in_.open(path, std::ios::binary);
  check_cfg(in_.good(), "cannot open " + path + " for reading");
}

void BinReader::raw(void* data, size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  check(in_.gcount() == static_cast<std::streamsize>(n) && !in_.fail(),
        path_ + ": truncated or unreadable file");
}

uint8_t BinReader::u8() {
  uint8_t v;
  raw(&v, 1);
  return v;
}

uint32_t BinReader::u32() {
  uint32_t v;
  raw(&v, 4);
  return v;
}

int64_t BinReader::i64() {
  int64_t v;
  raw(&v, 8);
  return v;
}

double BinReader::f64() {
  double v;
  raw(&v, 8);
  return v;
}

std::string BinReader::str() {
  uint32_t n = u32();
  check(n <= (1u << 20), path_ + ": implausible string length");
  std::string s(n, '\0');
  if (n) raw(s.data(), n);
  return s;
}

Mat BinReader::mat() {
  int64_t r = i64();
  int64_t c = i64();
  check(r >= 0 && c >= 0 && r < (1LL << 32) && c < (1LL << 32) && r * c < (1LL << 31),
        path_ + ": implausible matrix shape");
  RowMajorMat rm(r, c);
  if (rm.size()) raw(rm.data(), sizeof(double) * static_cast<size_t>(rm.size()));
  return Mat(rm);
}

void BinReader::expect_magic(const char* magic8, const std::string& what) {
  char buf[8];
  raw(buf, 8);
  check(std::memcmp(buf, magic8, 8) == 0, path_ + ": not a " + what + " file (bad magic)");
}

void save_model(const SequentialNetwork& net, const std::string& path) {
  net.validate();
  BinWriter w(path);
  w.raw(kModelMagic, 8);
  w.u32(kModelVersion);
  w.u8(net.token_input ? 1 : 0);
  w.i64(net.T);
  w.i64(net.input_width);
  w.u32(static_cast<uint32_t>(net.section_at.size()));
  for (size_t i = 0; i < net.section_at.size(); ++i) {
    w.i64(net.section_at[i]);
    w.i64(net.section_var_col[i]);
  }
  w.u32(static_cast<uint32_t>(net.layers.size()));
  for (const Layer& L : net.layers) {
    w.u8(kind_code(L.kind));
    w.u8(static_cast<uint8_t>(L.fn));
    w.u8(L.causal ? 1 : 0);
    w.i64(L.skip);
    w.i64(L.heads);
    w.f64(L.ln_eps);
    w.i64(L.width_in);
    w.i64(L.width_out);
    auto mats = layer_mats(L);
    w.u32(static_cast<uint32_t>(mats.size()));
    for (const Mat* m : mats) {
      w.i64(m->rows());
      w.i64(m->cols());
    }
  }
  for (const Layer& L : net.layers)
    for (const Mat* m : layer_mats(L)) {
      RowMajorMat rm = *m;
      w.raw(rm.data(), sizeof(double) * static_cast<size_t>(rm.size()));
    }
  w.close();
}

SequentialNetwork load_model(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kModelMagic, "model");
  uint32_t version = r.u32();
  check(version == kModelVersion,
        path + ": unsupported model file version " + std::to_string(version));
  SequentialNetwork net;
  net.token_input = r.u8() != 0;
  net.T = static_cast<int>(r.i64());
  net.input_width = r.i64();
  uint32_t n_sections = r.u32();
  check(n_sections >= 2 && n_sections <= 4096, path + ": implausible section count");
  net.section_at.resize(n_sections);
  net.section_var_col.resize(n_sections);
  for (uint32_t i = 0; i < n_sections; ++i) {
    net.section_at[i] = static_cast<int>(r.i64());
    net.section_var_col[i] = r.i64();
  }
  uint32_t n_layers = r.u32();
  check(n_layers >= 1 && n_layers <= 65536, path + ": implausible layer count");
  net.layers.resize(n_layers);
  std::vector<std::vector<std::pair<int64_t, int64_t>>> shapes(n_layers);
  for (uint32_t i = 0; i < n_layers; ++i) {
    Layer& L = net.layers[i];
    L.kind = kind_from_code(r.u8(), path);
    uint8_t fn = r.u8();
    check(fn <= static_cast<uint8_t>(ActFn::GELU), path + ": unknown activation code");
    L.fn = static_cast<ActFn>(fn);
    L.causal = r.u8() != 0;
    L.skip = r.i64();
    L.heads = static_cast<int>(r.i64());
    L.ln_eps = r.f64();
    L.width_in = r.i64();
    L.width_out = r.i64();
    if (L.kind == LayerKind::AttentionBlock) {
      check(L.heads > 0 && L.heads <= 4096, path + ": implausible head count");
      L.wq.resize(static_cast<size_t>(L.heads));
      L.wk.resize(static_cast<size_t>(L.heads));
      L.wv.resize(static_cast<size_t>(L.heads));
    }
    uint32_t n_mats = r.u32();
    check(n_mats == layer_mats(L).size(), path + ": layer matrix count mismatch");
    shapes[i].resize(n_mats);
    for (uint32_t m = 0; m < n_mats; ++m) {
      shapes[i][m].first = r.i64();
      shapes[i][m].second = r.i64();
    }
  }
  for (uint32_t i = 0; i < n_layers; ++i) {
    auto mats = layer_mats_mut(net.layers[i]);
    for (size_t m = 0; m < mats.size(); ++m) {
      auto [rows, cols] = shapes[i][m];
      check(rows >= 0 && cols >= 0 && rows * cols < (1LL << 31),
            path + ": implausible matrix shape");
      RowMajorMat rm(rows, cols);
      if (rm.size()) r.raw(rm.data(), sizeof(double) * static_cast<size_t>(rm.size()));
      *mats[m] = Mat(rm);
    }
  }
  net.validate();
  return net;
}

}  // namespace ibg
