#include "optolab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace optolab {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "tensors.bin is written in native little-endian order");

namespace {

struct Group {
    const char* name;
    const std::vector<Tensor>* tensors;
};

void index_group(Json& arr, const std::vector<std::string>& names, const std::vector<Tensor>& ts, std::uint64_t& offset,
                 const char* group) {
    for (std::size_t i = 0; i < ts.size(); ++i) {
        arr.push_back({{"group", group}, {"name", names[i]}, {"shape", ts[i].shape()}, {"offset", offset}});
        offset += ts[i].size() * sizeof(double);
    }
}

void write_all(std::ofstream& out, const std::vector<Tensor>& ts, const fs::path& path) {
    for (const auto& t : ts) out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw CheckpointError("failed writing " + path.string() + " (disk full?)");
}

Json read_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw CheckpointError("cannot open " + (dir / "manifest.json").string());
    Json j = Json::parse(in, nullptr, false);
    if (j.is_discarded()) throw CheckpointError((dir / "manifest.json").string() + " is not valid JSON");
    if (!j.contains("schema") || j["schema"] != kCheckpointSchema)
        throw CheckpointError("unsupported checkpoint schema in " + dir.string());
    return j;
}

// Reads every entry of `group` into `out` (already shaped), checking names and shapes.
void read_group(const Json& manifest, const fs::path& dir, const char* group, const ModelParams& layout,
                std::vector<Tensor>& out) {
    std::ifstream in(dir / "tensors.bin", std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + (dir / "tensors.bin").string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    out.assign(layout.tensors.size(), Tensor());
    std::vector<bool> filled(layout.tensors.size(), false);
    for (const auto& e : manifest.at("tensors")) {
        if (e.at("group") != group) continue;
        const std::string name = e.at("name");
        std::size_t idx;
        try {
            idx = layout.index(name);
        } catch (const std::exception&) {
            throw CheckpointError("checkpoint tensor '" + name + "' is not a parameter of this model");
        }
        const Shape shape = e.at("shape").get<Shape>();
        if (shape != layout.tensors[idx].shape())
            throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                  shape_str(layout.tensors[idx].shape()));
        const std::uint64_t offset = e.at("offset");
        Tensor t(shape);
        const std::uint64_t bytes = t.size() * sizeof(double);
        if (offset + bytes > size) throw CheckpointError("tensors.bin is truncated at '" + name + "'");
        in.seekg(static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(bytes));
        if (!in) throw CheckpointError("failed reading '" + name + "'");
        out[idx] = std::move(t);
        filled[idx] = true;
    }
    for (std::size_t i = 0; i < filled.size(); ++i)
        if (!filled[i]) throw CheckpointError(std::string("checkpoint lacks ") + group + " tensor '" + layout.names[i] + "'");
}

ModelParams layout_from(const Json& manifest) {
    ModelConfig cfg;
    from_json(manifest.at("model"), cfg, "manifest.model");
    cfg.validate();
    return init_params(cfg, 0);
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
    if (ck.adam.m.size() != ck.params.tensors.size() || ck.adam.v.size() != ck.params.tensors.size())
        throw CheckpointError("Adam state does not match the parameters");
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    std::uint64_t offset = 0;
    Json tensors = Json::array();
    for (const Group g : {Group{"param", &ck.params.tensors}, Group{"adam_m", &ck.adam.m}, Group{"adam_v", &ck.adam.v}})
        index_group(tensors, ck.params.names, *g.tensors, offset, g.name);
    Json manifest{{"schema", kCheckpointSchema},
                  {"config_hash", ck.config_hash},
                  {"step", ck.step},
                  {"adam_step", ck.adam.step},
                  {"data_rng", {{"key", ck.data_rng.key()}, {"counter", ck.data_rng.counter()}}},
                  {"model", to_json(ck.params.config)},
                  {"experiment", ck.experiment},
                  {"run_state", ck.run_state},
                  {"tensors", tensors}};
    {
        std::ofstream bin(tmp / "tensors.bin", std::ios::binary | std::ios::trunc);
        write_all(bin, ck.params.tensors, tmp / "tensors.bin");
        write_all(bin, ck.adam.m, tmp / "tensors.bin");
        write_all(bin, ck.adam.v, tmp / "tensors.bin");
        bin.close();
        if (!bin) throw CheckpointError("failed closing " + (tmp / "tensors.bin").string());
    }
    {
        std::ofstream js(tmp / "manifest.json", std::ios::trunc);
        js << manifest.dump(2) << "\n";
        js.close();
        if (!js) throw CheckpointError("failed writing " + (tmp / "manifest.json").string());
    }
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) try {
    const Json manifest = read_manifest(dir);
    Checkpoint ck;
    ck.params = layout_from(manifest);
    ck.experiment = manifest.value("experiment", Json::object());
    ck.config_hash = manifest.value("config_hash", "");
    ck.run_state = manifest.value("run_state", Json::object());
    ck.step = manifest.at("step");
    std::vector<Tensor> p;
    read_group(manifest, dir, "param", ck.params, p);
    ck.adam.step = manifest.at("adam_step");
    read_group(manifest, dir, "adam_m", ck.params, ck.adam.m);
    read_group(manifest, dir, "adam_v", ck.params, ck.adam.v);
    ck.params.tensors = std::move(p);
    ck.data_rng = CounterRng::from_state(manifest.at("data_rng").at("key"), manifest.at("data_rng").at("counter"));
    if (!ck.params.all_finite()) throw CheckpointError("checkpoint " + dir.string() + " holds non-finite parameters");
    return ck;
} catch (const Json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
}

ModelParams load_params(const fs::path& dir) try {
    const Json manifest = read_manifest(dir);
    ModelParams p = layout_from(manifest);
    std::vector<Tensor> t;
    read_group(manifest, dir, "param", p, t);
    p.tensors = std::move(t);
    if (!p.all_finite()) throw CheckpointError("checkpoint " + dir.string() + " holds non-finite parameters");
    return p;
} catch (const Json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
}

}  // namespace optolab
