#include "confseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "confseg/dataio.hpp"

namespace confseg::nn {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_floats(std::span<const float> values) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
        bytes.insert(bytes.end(), p, p + values.size_bytes());
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::vector<float> get_floats(std::size_t n) {
        need(n * sizeof(float));
        std::vector<float> out(n);
        std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return out;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : params) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes = {'C', 'K', 'P', 'T'};
    w.put<std::uint8_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& e : ckpt.params) {
        if (e.values.size() != numel(e.shape)) throw std::invalid_argument("checkpoint entry size mismatch: " + e.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
        w.bytes.insert(w.bytes.end(), e.name.begin(), e.name.end());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        w.put_floats(e.values);
    }
    w.put<std::uint8_t>(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        w.put<double>(o.lr);
        w.put<double>(o.config.beta1);
        w.put<double>(o.config.beta2);
        w.put<double>(o.config.eps);
        w.put<std::uint64_t>(o.step);
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            w.put_floats(o.first_moments.at(i));
            w.put_floats(o.second_moments.at(i));
        }
    }
    return w.bytes;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 5 || std::memcmp(bytes.data(), "CKPT", 4) != 0) throw std::runtime_error("not a checkpoint");
    Reader r(bytes.subspan(4));
    if (r.get<std::uint8_t>() != kCheckpointVersion) throw std::runtime_error("checkpoint version mismatch");
    Checkpoint ckpt;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.get_string(r.get<std::uint32_t>());
        const auto ndim = r.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.get<std::uint32_t>());
        e.values = r.get_floats(numel(e.shape));
        ckpt.params.push_back(std::move(e));
    }
    if (r.get<std::uint8_t>() != 0) {
        OptimizerSnapshot o;
        o.lr = r.get<double>();
        o.config.lr = o.lr;
        o.config.beta1 = r.get<double>();
        o.config.beta2 = r.get<double>();
        o.config.eps = r.get<double>();
        o.step = r.get<std::uint64_t>();
        for (const auto& e : ckpt.params) {
            o.first_moments.push_back(r.get_floats(e.values.size()));
            o.second_moments.push_back(r.get_floats(e.values.size()));
        }
        ckpt.optimizer = std::move(o);
    }
    if (!r.done()) throw std::runtime_error("trailing bytes in checkpoint");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path));
}

template <typename Real>
Checkpoint snapshot(const ParamList<Real>& params) {
    Checkpoint ckpt;
    for (const auto& p : params) {
        const auto data = p.tensor.data();
        ckpt.params.push_back({p.name, p.tensor.shape(), std::vector<float>(data.begin(), data.end())});
    }
    return ckpt;
}

template <typename Real>
Checkpoint snapshot(const ParamList<Real>& params, const Adam<Real>& optimizer) {
    Checkpoint ckpt = snapshot(params);
    OptimizerSnapshot o;
    o.config = optimizer.config();
    o.lr = optimizer.lr();
    o.step = optimizer.steps();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& m = optimizer.first_moments().at(i);
        const auto& v = optimizer.second_moments().at(i);
        o.first_moments.emplace_back(m.begin(), m.end());
        o.second_moments.emplace_back(v.begin(), v.end());
    }
    ckpt.optimizer = std::move(o);
    return ckpt;
}

template <typename Real>
void restore(const Checkpoint& ckpt, const ParamList<Real>& params, const std::string& prefix) {
    for (const auto& p : params) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        const auto* e = ckpt.find(p.name);
        if (e == nullptr) throw std::runtime_error("checkpoint has no parameter " + p.name);
        if (e->shape != p.tensor.shape()) {
            throw std::runtime_error("checkpoint shape mismatch for " + p.name + ": " + shape_string(e->shape) +
                                     " vs " + shape_string(p.tensor.shape()));
        }
        Tensor<Real> handle = p.tensor;
        auto dst = handle.data();
        std::copy(e->values.begin(), e->values.end(), dst.begin());
    }
}

template <typename Real>
void restore_optimizer(const Checkpoint& ckpt, Adam<Real>& optimizer) {
    if (!ckpt.optimizer) throw std::runtime_error("checkpoint carries no optimizer state");
    const auto& o = *ckpt.optimizer;
    if (o.first_moments.size() != optimizer.params().size()) throw std::runtime_error("optimizer state size mismatch");
    for (std::size_t i = 0; i < o.first_moments.size(); ++i) {
        auto& m = optimizer.first_moments()[i];
        auto& v = optimizer.second_moments()[i];
        if (m.size() != o.first_moments[i].size()) throw std::runtime_error("optimizer moment shape mismatch");
        std::copy(o.first_moments[i].begin(), o.first_moments[i].end(), m.begin());
        std::copy(o.second_moments[i].begin(), o.second_moments[i].end(), v.begin());
    }
    optimizer.set_steps(o.step);
    optimizer.set_lr(o.lr);
}

template Checkpoint snapshot<float>(const ParamList<float>&);
template Checkpoint snapshot<double>(const ParamList<double>&);
template Checkpoint snapshot<float>(const ParamList<float>&, const Adam<float>&);
template Checkpoint snapshot<double>(const ParamList<double>&, const Adam<double>&);
template void restore<float>(const Checkpoint&, const ParamList<float>&, const std::string&);
template void restore<double>(const Checkpoint&, const ParamList<double>&, const std::string&);
template void restore_optimizer<float>(const Checkpoint&, Adam<float>&);
template void restore_optimizer<double>(const Checkpoint&, Adam<double>&);

}  // namespace confseg::nn
