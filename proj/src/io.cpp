#include "certilax/io.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "certilax/rng.hpp"

namespace certilax {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& W) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < W.cols(); ++j) row.push_back(W(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Matrix matrix_from_json(const json& rows, const std::string& what) {
  if (!rows.is_array() || rows.empty())
    throw std::runtime_error(what + ": expected a non-empty array of rows");
  const size_t cols = rows.front().is_array() ? rows.front().size() : 0;
  if (cols == 0)
    throw std::runtime_error(what + ": rows must be non-empty arrays");
  Matrix W(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(cols));
  for (size_t i = 0; i < rows.size(); ++i) {
    const json& row = rows[i];
    if (!row.is_array() || row.size() != cols)
      throw std::runtime_error(what + ": ragged row " + std::to_string(i));
    for (size_t j = 0; j < cols; ++j)
      W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          row[j].get<double>();
  }
  return W;
}

Vector vector_from_json(const json& arr, const std::string& what) {
  if (!arr.is_array())
    throw std::runtime_error(what + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (size_t i = 0; i < arr.size(); ++i)
    v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

}  // namespace

std::string model_to_json(const MlpNetwork& net) {
  json doc;
  json layers = json::array();
  for (int k = 1; k <= net.num_hidden_layers(); ++k) {
    const Layer& l = net.hidden(k);
    layers.push_back({{"W", matrix_to_json(l.W)}, {"b", vector_to_json(l.b)}});
  }
  layers.push_back({{"W", matrix_to_json(net.output().W)},
                    {"b", vector_to_json(net.output().b)}});
  doc["layers"] = std::move(layers);
  doc["meta"] = {{"input_dim", net.input_dim()},
                 {"classes", net.num_classes()}};
  return doc.dump(2) + "\n";
}

MlpNetwork model_from_json(const std::string& text) {
  json doc = json::parse(text);
  if (!doc.contains("layers") || !doc["layers"].is_array() ||
      doc["layers"].empty())
    throw std::runtime_error("model: missing or empty \"layers\" array");
  std::vector<Layer> all;
  for (size_t k = 0; k < doc["layers"].size(); ++k) {
    const json& jl = doc["layers"][k];
    std::string tag = "model layer " + std::to_string(k);
    Layer l;
    l.W = matrix_from_json(jl.at("W"), tag + " W");
    l.b = vector_from_json(jl.at("b"), tag + " b");
    if (l.W.rows() != l.b.size())
      throw std::runtime_error(tag + ": W rows != b length");
    all.push_back(std::move(l));
  }
  for (size_t k = 1; k < all.size(); ++k)
    if (all[k].W.cols() != all[k - 1].W.rows())
      throw std::runtime_error("model: dimension chain broken at layer " +
                               std::to_string(k));
  if (doc.contains("meta")) {
    const json& meta = doc["meta"];
    if (meta.contains("input_dim") &&
        meta["input_dim"].get<int>() != all.front().W.cols())
      throw std::runtime_error("model: meta.input_dim disagrees with layer 0");
    if (meta.contains("classes") &&
        meta["classes"].get<int>() != all.back().W.rows())
      throw std::runtime_error(
          "model: meta.classes disagrees with the output layer");
  }
  Layer output = all.back();
  all.pop_back();
  return MlpNetwork(std::move(all), std::move(output));
}

MlpNetwork load_model(const std::string& path) {
  return model_from_json(read_file(path));
}

void save_model(const MlpNetwork& net, const std::string& path) {
  write_file(path, model_to_json(net));
}

Vector load_input(const std::string& path) {
  json doc = json::parse(read_file(path));
  if (!doc.contains("x"))
    throw std::runtime_error("input: missing \"x\" array");
  return vector_from_json(doc["x"], "input x");
}

void save_input(const Vector& x, const std::string& path) {
  json doc;
  doc["x"] = vector_to_json(x);
  write_file(path, doc.dump(2) + "\n");
}

MlpNetwork generate_model(const std::vector<int>& dims, uint64_t seed) {
  if (dims.size() < 2)
    throw std::invalid_argument("generate_model: need at least input and output dims");
  for (int d : dims)
    if (d <= 0)
      throw std::invalid_argument("generate_model: dims must be positive");
  Rng rng(derive_seed(seed, 0x6d6f64656cull));  // per-purpose substream
  std::vector<Layer> layers;
  for (size_t k = 0; k + 1 < dims.size(); ++k) {
    Layer l;
    const int fan_in = dims[k];
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    l.W = Matrix(dims[k + 1], fan_in);
    for (Eigen::Index i = 0; i < l.W.rows(); ++i)
      for (Eigen::Index j = 0; j < l.W.cols(); ++j)
        l.W(i, j) = scale * rng.normal();
    l.b = Vector(dims[k + 1]);
    for (Eigen::Index i = 0; i < l.b.size(); ++i)
      l.b(i) = scale * rng.normal();
    layers.push_back(std::move(l));
  }
  Layer output = layers.back();
  layers.pop_back();
  return MlpNetwork(std::move(layers), std::move(output));
}

std::string digest_bytes(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= static_cast<uint64_t>(c);
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string digest_file(const std::string& path) {
  return digest_bytes(read_file(path));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace certilax
