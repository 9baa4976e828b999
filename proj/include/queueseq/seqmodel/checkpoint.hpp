#pragma once

// Checkpoint container:
//   "QSEQCKPT" | u32 version | u64 header bytes | JSON header | f64 data
// The header names every tensor with its shape and offset; data holds the
// parameters followed by the Adam moments when present, little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "queueseq/jsonl.hpp"
#include "queueseq/seqmodel/train.hpp"

namespace queueseq {

inline constexpr char kCheckpointMagic[8] = {'Q', 'S', 'E', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  TrainState state;
  Json extra = Json::object();  // training options, data paths, ...
};

inline std::vector<double> checkpoint_payload(const TrainState& st) {
  std::vector<double> data(st.model.params.data().begin(), st.model.params.data().end());
  data.insert(data.end(), st.adam.m.begin(), st.adam.m.end());
  data.insert(data.end(), st.adam.v.begin(), st.adam.v.end());
  return data;
}

inline void save_checkpoint(const std::string& path, const TrainState& st, const Json& extra = Json::object()) {
  Json tensors = Json::array();
  for (const auto& t : st.model.params.tensors())
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
  Json hist = Json::array();
  for (const auto& e : st.history)
    hist.push_back({{"epoch", e.epoch},
                    {"lr", e.lr},
                    {"train_loss", e.train_loss},
                    {"train_event", e.train_event},
                    {"train_class", e.train_class},
                    {"train_time", e.train_time},
                    {"val_loss", std::isnan(e.val_loss) ? Json(nullptr) : Json(e.val_loss)}});
  const Json header = {{"format", "queueseq-checkpoint"},
                       {"model", to_json(st.model.cfg)},
                       {"schema", to_json(*st.model.cfg.schema)},
                       {"tensors", tensors},
                       {"n_params", st.model.params.size()},
                       {"has_optimizer", !st.adam.m.empty()},
                       {"adam_step", st.adam.step},
                       {"epoch", st.epoch},
                       {"history", hist},
                       {"extra", extra}};
  const std::string h = header.dump();
  const auto data = checkpoint_payload(st);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  const std::uint64_t hlen = h.size();
  out.write(kCheckpointMagic, 8);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("'" + path + "' is not a checkpoint");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  if (hlen > (1ULL << 30)) throw FormatError("checkpoint header too large");
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw FormatError("truncated checkpoint header");
  Json header;
  try {
    header = Json::parse(h);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  auto schema = std::make_shared<const EventSchema>(schema_from_json(header.at("schema")));
  auto cfg = model_config_from_json(header.at("model"), schema);
  std::vector<TensorInfo> tensors;
  for (const auto& t : header.at("tensors"))
    tensors.push_back({t.at("name").get<std::string>(), t.at("rows").get<int>(), t.at("cols").get<int>(),
                       t.at("offset").get<std::size_t>()});
  const auto n = header.at("n_params").get<std::size_t>();
  const bool opt = header.at("has_optimizer").get<bool>();
  std::vector<double> data(opt ? 3 * n : n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw FormatError("truncated checkpoint data");
  std::vector<double> params(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
  Checkpoint ck;
  ck.state.model = SeqModel::from_params(std::move(cfg), ParamStore::from_layout(tensors, std::move(params)));
  if (opt) {
    ck.state.adam.m.assign(data.begin() + static_cast<std::ptrdiff_t>(n), data.begin() + static_cast<std::ptrdiff_t>(2 * n));
    ck.state.adam.v.assign(data.begin() + static_cast<std::ptrdiff_t>(2 * n), data.end());
  }
  ck.state.adam.step = header.at("adam_step").get<long>();
  ck.state.epoch = header.at("epoch").get<int>();
  for (const auto& e : header.at("history")) {
    EpochStats s;
    s.epoch = e.at("epoch").get<int>();
    s.lr = e.at("lr").get<double>();
    s.train_loss = e.at("train_loss").get<double>();
    s.train_event = e.at("train_event").get<double>();
    s.train_class = e.at("train_class").get<double>();
    s.train_time = e.at("train_time").get<double>();
    if (!e.at("val_loss").is_null()) s.val_loss = e.at("val_loss").get<double>();
    ck.state.history.push_back(s);
  }
  ck.extra = header.at("extra");
  return ck;
}

inline std::string loss_history_csv(const std::vector<EpochStats>& h) {
  std::string out = "epoch,lr,train_loss,train_event,train_class,train_time,val_loss\n";
  for (const auto& e : h) {
    out += std::to_string(e.epoch) + "," + format_double(e.lr) + "," + format_double(e.train_loss) + "," +
           format_double(e.train_event) + "," + format_double(e.train_class) + "," + format_double(e.train_time) + "," +
           (std::isnan(e.val_loss) ? std::string() : format_double(e.val_loss)) + "\n";
  }
  return out;
}

}  // namespace queueseq
