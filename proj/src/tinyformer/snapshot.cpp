#include "circuitlab/tinyformer/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace clab {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'L', 'A', 'B', 'S', 'N', 'A', 'P'};

template <class T>
void put(std::string& out, T v)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

struct Reader {
    const std::string& bytes;
    std::size_t at = 0;

    template <class T>
    T get()
    {
        if (at + sizeof(T) > bytes.size()) throw SnapshotError("snapshot truncated");
        T v;
        std::memcpy(&v, bytes.data() + at, sizeof(T));
        at += sizeof(T);
        return v;
    }
};

}  // namespace

std::string snapshot_bytes(const TinyFormer& model)
{
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kSnapshotVersion);
    const ModelConfig& c = model.config();
    for (const int v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len}) put<std::int32_t>(out, v);
    put<std::uint64_t>(out, c.init_seed);
    put<std::uint8_t>(out, c.normalize ? 1 : 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(c.activation));
    for (const auto& comp : model.weights())
        for (const Matrix& m : comp) {
            put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
            put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
            out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
        }
    return out;
}

TinyFormer snapshot_from_bytes(const std::string& bytes)
{
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw SnapshotError("not a snapshot file (bad magic)");
    Reader r{bytes, sizeof kMagic};
    const auto version = r.get<std::uint32_t>();
    if (version != kSnapshotVersion) throw SnapshotError("unsupported snapshot version " + std::to_string(version));
    ModelConfig c;
    c.n_layers = r.get<std::int32_t>();
    c.n_heads = r.get<std::int32_t>();
    c.d_model = r.get<std::int32_t>();
    c.d_ff = r.get<std::int32_t>();
    c.vocab_size = r.get<std::int32_t>();
    c.max_seq_len = r.get<std::int32_t>();
    c.init_seed = r.get<std::uint64_t>();
    c.normalize = r.get<std::uint8_t>() != 0;
    const auto act = r.get<std::uint8_t>();
    if (act > 1) throw SnapshotError("bad activation tag");
    c.activation = static_cast<Activation>(act);
    c.validate();

    // Shapes come from a fresh initialization so the file cannot smuggle in a
    // different architecture.
    Weights w = initial_weights(c, build_graph(c));
    for (auto& comp : w)
        for (Matrix& m : comp) {
            const auto rows = r.get<std::uint64_t>();
            const auto cols = r.get<std::uint64_t>();
            if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
                throw SnapshotError("snapshot matrix shape mismatch");
            const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
            if (r.at + n > bytes.size()) throw SnapshotError("snapshot truncated");
            std::memcpy(m.data(), bytes.data() + r.at, n);
            r.at += n;
        }
    if (r.at != bytes.size()) throw SnapshotError("trailing bytes in snapshot");
    return TinyFormer(c, std::move(w));
}

void write_snapshot(const TinyFormer& model, const std::filesystem::path& path)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw SnapshotError("cannot open " + path.string() + " for writing");
    const std::string b = snapshot_bytes(model);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw SnapshotError("write failed: " + path.string());
}

TinyFormer read_snapshot(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SnapshotError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return snapshot_from_bytes(ss.str());
}

}  // namespace clab
