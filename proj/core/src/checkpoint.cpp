#include "marval/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "marval/errors.hpp"

namespace marval {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'R', 'V', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeader = 4 + 4 + 8;

class Writer {
  public:
    template <class T>
    void pod(const T& v) {
        buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint64_t>(s.size()));
        buf_.append(s);
    }
    void mat(const ad::Mat& m) {
        pod(static_cast<std::uint64_t>(m.rows()));
        pod(static_cast<std::uint64_t>(m.cols()));
        buf_.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    void mats(const std::map<std::string, ad::Mat>& ms) {
        pod(static_cast<std::uint64_t>(ms.size()));
        for (const auto& [k, m] : ms) {
            str(k);
            mat(m);
        }
    }
    const std::string& bytes() const { return buf_; }

  private:
    std::string buf_;
};

class Reader {
  public:
    explicit Reader(std::string_view data) : data_(data) {}

    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    ad::Mat mat() {
        const auto rows = pod<std::uint64_t>();
        const auto cols = pod<std::uint64_t>();
        need(rows * cols * sizeof(double));
        ad::Mat m(static_cast<ad::Index>(rows), static_cast<ad::Index>(cols));
        std::memcpy(m.data(), data_.data() + pos_, rows * cols * sizeof(double));
        pos_ += rows * cols * sizeof(double);
        return m;
    }
    std::map<std::string, ad::Mat> mats() {
        std::map<std::string, ad::Mat> out;
        const auto n = pod<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) {
            auto k = str();
            out.emplace(std::move(k), mat());
        }
        return out;
    }
    bool done() const { return pos_ == data_.size(); }

  private:
    void need(std::uint64_t n) const {
        if (n > data_.size() - pos_) throw IntegrityError("checkpoint payload is truncated");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view s) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

}  // namespace

OptimizerState capture(const nn::AdamW& opt) { return {opt.steps(), opt.first_moments(), opt.second_moments()}; }

void restore(nn::AdamW& opt, const OptimizerState& state) {
    opt.set_steps(state.steps);
    opt.first_moments() = state.first;
    opt.second_moments() = state.second;
}

bool Checkpoint::operator==(const Checkpoint& other) const {
    if (stage != other.stage || step != other.step || config_hash != other.config_hash) return false;
    if (optimizers != other.optimizers || rng_states != other.rng_states || scalars != other.scalars) return false;
    if (stores.size() != other.stores.size()) return false;
    for (const auto& [name, store] : stores) {
        const auto it = other.stores.find(name);
        if (it == other.stores.end() || !store.same_values(it->second)) return false;
    }
    return true;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    Writer w;
    w.str(ckpt.stage);
    w.pod(static_cast<std::int64_t>(ckpt.step));
    w.str(ckpt.config_hash);
    w.pod(static_cast<std::uint64_t>(ckpt.stores.size()));
    for (const auto& [name, store] : ckpt.stores) {
        w.str(name);
        std::map<std::string, ad::Mat> values;
        for (const auto& [k, p] : store.items()) values.emplace(k, p.value);
        w.mats(values);
    }
    w.pod(static_cast<std::uint64_t>(ckpt.optimizers.size()));
    for (const auto& [name, opt] : ckpt.optimizers) {
        w.str(name);
        w.pod(static_cast<std::int64_t>(opt.steps));
        w.mats(opt.first);
        w.mats(opt.second);
    }
    w.pod(static_cast<std::uint64_t>(ckpt.rng_states.size()));
    for (const auto& [name, state] : ckpt.rng_states) {
        w.str(name);
        w.str(state);
    }
    w.pod(static_cast<std::uint64_t>(ckpt.scalars.size()));
    for (const auto& [name, v] : ckpt.scalars) {
        w.str(name);
        w.pod(v);
    }

    const std::string& payload = w.bytes();
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint: " + tmp);
        os.write(kMagic, 4);
        os.write(reinterpret_cast<const char*>(&kVersion), 4);
        const auto len = static_cast<std::uint64_t>(payload.size());
        os.write(reinterpret_cast<const char*>(&len), 8);
        os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        const std::uint32_t crc = crc_of(payload);
        os.write(reinterpret_cast<const char*>(&crc), 4);
        os.flush();
        if (!os) throw IoError("short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash,
                           bool allow_hash_mismatch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string file = ss.str();
    if (file.size() < kHeader + 4 || std::memcmp(file.data(), kMagic, 4) != 0) {
        throw IntegrityError("not a checkpoint or truncated header: " + path.string());
    }
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    std::memcpy(&version, file.data() + 4, 4);
    std::memcpy(&len, file.data() + 8, 8);
    if (version != kVersion) throw IntegrityError("unsupported checkpoint version in " + path.string());
    if (len != file.size() - kHeader - 4) throw IntegrityError("checkpoint size mismatch (truncated?): " + path.string());
    const std::string_view payload(file.data() + kHeader, len);
    std::uint32_t crc = 0;
    std::memcpy(&crc, file.data() + kHeader + len, 4);
    if (crc != crc_of(payload)) throw IntegrityError("checkpoint checksum mismatch: " + path.string());

    Reader r(payload);
    Checkpoint c;
    c.stage = r.str();
    c.step = static_cast<long>(r.pod<std::int64_t>());
    c.config_hash = r.str();
    const auto n_stores = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_stores; ++i) {
        auto name = r.str();
        nn::ParamStore store;
        for (auto& [k, m] : r.mats()) store.add(k, std::move(m));
        c.stores.emplace(std::move(name), std::move(store));
    }
    const auto n_opts = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_opts; ++i) {
        auto name = r.str();
        OptimizerState o;
        o.steps = static_cast<long>(r.pod<std::int64_t>());
        o.first = r.mats();
        o.second = r.mats();
        c.optimizers.emplace(std::move(name), std::move(o));
    }
    const auto n_rng = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_rng; ++i) {
        auto name = r.str();
        c.rng_states.emplace(std::move(name), r.str());
    }
    const auto n_scalars = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_scalars; ++i) {
        auto name = r.str();
        c.scalars.emplace(std::move(name), r.pod<double>());
    }
    if (!r.done()) throw IntegrityError("trailing bytes in checkpoint payload: " + path.string());

    if (!expected_hash.empty() && c.config_hash != expected_hash) {
        const std::string msg = "checkpoint " + path.string() + " was written under config " + c.config_hash +
                                ", current config is " + expected_hash;
        if (!allow_hash_mismatch) throw IntegrityError(msg + " (pass --allow-config-mismatch to load anyway)");
        std::cerr << "warning: " << msg << "\n";
    }
    return c;
}

}  // namespace marval
