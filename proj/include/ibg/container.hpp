#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "ibg/common.hpp"
#include "ibg/model.hpp"

namespace ibg {

// Little-endian binary framing shared by the model, basis-bundle, and edge
// files. Scalars are fixed-width LE; matrices are i64 rows, i64 cols, then
// row-major f64 payload. Round-trips are bit-exact.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path);
  void u8(uint8_t v);
  void u32(uint32_t v);
  void i64(int64_t v);
  void f64(double v);
  void str(const std::string& s);  // u32 length + raw bytes
  void mat(const Mat& m);
  void raw(const void* data, size_t n);
  void close();  // flush and verify stream health

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path);
  uint8_t u8();
  uint32_t u32();
  int64_t i64();
  double f64();
  std::string str();
  Mat mat();
  void raw(void* data, size_t n);
  void expect_magic(const char* magic8, const std::string& what);
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

void save_model(const SequentialNetwork& net, const std::string& path);
SequentialNetwork load_model(const std::string& path);

}  // namespace ibg
