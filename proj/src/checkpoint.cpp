#include "moose/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace moose {
namespace {

constexpr const char* kMagic = "moose-ckpt-v1";

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::string read_line(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("unexpected end of checkpoint");
  return line;
}

}  // namespace

void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "tensor " << name << ' ' << t.rank();
  for (int d : t.dims()) os << ' ' << d;
  os << '\n';
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  os << '\n';
}

std::vector<std::pair<std::string, Tensor>> read_tensor_entries(std::istream& is) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (;;) {
    const std::string line = read_line(is);
    if (line == "end") return out;
    std::istringstream ls(line);
    std::string kw, name;
    int rank = 0;
    if (!(ls >> kw >> name >> rank) || kw != "tensor" || rank < 0 || rank > 8) {
      throw DataError("malformed tensor entry: " + line);
    }
    std::vector<int> dims(rank);
    for (int& d : dims) {
      if (!(ls >> d) || d < 0) throw DataError("malformed tensor dims: " + line);
    }
    Tensor t(dims);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is || is.get() != '\n') throw DataError("truncated tensor data for " + name);
    out.emplace_back(name, std::move(t));
  }
}

void write_model(std::ostream& os, const PyramidModel& model) {
  const PyramidConfig& p = model.pyramid;
  os << kMagic << "\n[config]\n"
     << "num_classes=" << p.num_classes << '\n'
     << "encoder_channels=" << p.encoder_channels << '\n'
     << "branch_dilations=" << join(p.branch_dilations) << '\n'
     << "branch_channels=" << p.branch_channels << '\n'
     << "include_global_pool_branch=" << p.include_global_pool_branch << '\n'
     << "output_stride=" << p.output_stride << '\n'
     << "shared_dilation=" << p.shared_dilation << '\n'
     << "head_projection_channels=" << p.head_projection_channels << '\n'
     << "head_depth=" << p.head_depth << '\n'
     << "probe_count=" << model.probes.size() << '\n'
     << "probe_depth=" << model.probe.depth << '\n'
     << "probe_projection_channels=" << model.probe.projection_channels << '\n'
     << "[tensors]\n";
  PyramidModel::visit(model, [&](const std::string& name, const Tensor& t, const nn::Param*) {
    write_tensor_entry(os, name, t);
  });
  os << "end\n";
}

PyramidModel read_model(std::istream& is) {
  if (read_line(is) != kMagic) throw DataError("not a moose checkpoint (bad magic)");
  if (read_line(is) != "[config]") throw DataError("checkpoint is missing its [config] block");
  std::map<std::string, std::string> kv;
  for (;;) {
    const std::string line = read_line(is);
    if (line == "[tensors]") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad checkpoint config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("checkpoint config lacks ") + key);
    return it->second;
  };
  PyramidConfig p;
  ProbeConfig h;
  p.num_classes = std::stoi(get("num_classes"));
  p.encoder_channels = std::stoi(get("encoder_channels"));
  p.branch_dilations = split_ints(get("branch_dilations"));
  p.branch_channels = std::stoi(get("branch_channels"));
  p.include_global_pool_branch = get("include_global_pool_branch") == "1";
  p.output_stride = std::stoi(get("output_stride"));
  p.shared_dilation = get("shared_dilation") == "1";
  p.head_projection_channels = std::stoi(get("head_projection_channels"));
  p.head_depth = std::stoi(get("head_depth"));
  h.depth = std::stoi(get("probe_depth"));
  h.projection_channels = std::stoi(get("probe_projection_channels"));
  const int probe_count = std::stoi(get("probe_count"));

  PyramidModel model = build_model(p, h, 0);
  if (probe_count == 0) model.probes.clear();
  else if (probe_count != static_cast<int>(model.probes.size())) throw DataError("checkpoint probe count mismatch");

  std::map<std::string, Tensor> entries;
  for (auto& [name, t] : read_tensor_entries(is)) entries[name] = std::move(t);
  std::size_t used = 0;
  PyramidModel::visit(model, [&](const std::string& name, Tensor& t, nn::Param*) {
    auto it = entries.find(name);
    if (it == entries.end()) throw DataError("checkpoint lacks tensor " + name);
    if (!it->second.same_shape(t)) {
      throw DataError("checkpoint tensor " + name + " has shape " + it->second.shape_string() +
                      ", expected " + t.shape_string());
    }
    t = it->second;
    ++used;
  });
  if (used != entries.size()) throw DataError("checkpoint holds tensors unknown to this architecture");
  return model;
}

void save_model(const std::filesystem::path& path, const PyramidModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write_model(os, model);
  if (!os) throw DataError("failed writing " + path.string());
}

PyramidModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read_model(is);
}

}  // namespace moose
