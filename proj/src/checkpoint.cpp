#include "occmesh/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace occmesh::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'M', 'C', 'K'};

template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ofstream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw CheckpointError("cannot open checkpoint " + path);
    }
    void bytes(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError("checkpoint " + path_ + " is truncated");
    }
    template <class T>
    T get() {
        T v{};
        bytes(&v, sizeof v);
        return v;
    }
    std::string string() {
        const auto n = get<std::uint32_t>();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& config, const model::ModelParams& params,
                     std::uint64_t step) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, step);
    put_string(out, to_text(config));
    const auto named = params.named();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& nt : named) {
        put_string(out, nt.name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.tensor.rank()));
        for (Index d : nt.tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        const auto data = nt.tensor.data();
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    }
    out.flush();
    if (!out) throw CheckpointError("write failed for checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader in(path);
    char magic[4];
    in.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad magic in checkpoint " + path);
    const auto version = in.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.step = in.get<std::uint64_t>();
    ck.config = parse_config(in.string());
    ck.config.validate();

    std::map<std::string, std::pair<Shape, std::vector<double>>> table;
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = in.string();
        const auto rank = in.get<std::uint32_t>();
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<Index>(in.get<std::uint64_t>());
        std::vector<double> data(static_cast<std::size_t>(numel(shape)));
        in.bytes(data.data(), data.size() * sizeof(double));
        table.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }

    ck.params = model::ModelParams::init(ck.config.model, ck.config.seed);
    const auto named = ck.params.named();
    if (named.size() != table.size()) {
        throw CheckpointError("checkpoint " + path + " holds " + std::to_string(table.size()) +
                              " tensors, model expects " + std::to_string(named.size()));
    }
    for (const auto& nt : named) {
        auto it = table.find(nt.name);
        if (it == table.end()) throw CheckpointError("checkpoint " + path + " lacks tensor " + nt.name);
        if (it->second.first != nt.tensor.shape()) {
            throw CheckpointError("checkpoint tensor " + nt.name + " has shape " + shape_str(it->second.first) +
                                  ", model expects " + shape_str(nt.tensor.shape()));
        }
        Tensor t = nt.tensor;
        auto dst = t.mutable_data();
        std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
    }
    return ck;
}

}  // namespace occmesh::harness
