#pragma once

// Binary checkpoint: "MSGN", u32 format version, then a fixed sequence of
// sections, each a four-byte tag and a u64 payload length. Integers and
// doubles are little-endian; matrices carry a (rows, cols) header and
// column-major data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "missgan/trainer.hpp"

namespace missgan {

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(std::string_view s) {
        u64(s.size());
        buf_.append(s);
    }
    void strings(const std::vector<std::string>& v) {
        u64(v.size());
        for (const auto& s : v) str(s);
    }
    template <class Derived>
    void matrix(const Eigen::DenseBase<Derived>& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i) f64(m(i, j));
    }
    void bytes(const std::vector<std::uint8_t>& v) {
        u64(v.size());
        for (auto b : v) u8(b);
    }
    const std::string& data() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const auto n = count(1);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::vector<std::string> strings() {
        std::vector<std::string> v(count(8));
        for (auto& s : v) s = str();
        return v;
    }
    Eigen::MatrixXd matrix() {
        const auto rows = u64(), cols = u64();
        if (rows != 0 && cols > (data_.size() - pos_) / 8 / rows) fail("matrix larger than the section");
        Eigen::MatrixXd m(static_cast<Index>(rows), static_cast<Index>(cols));
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i) m(i, j) = f64();
        return m;
    }
    Eigen::VectorXd vector() {
        const Eigen::MatrixXd m = matrix();
        if (m.cols() != 1 && m.size() != 0) fail("expected a column vector");
        return m.size() == 0 ? Eigen::VectorXd() : Eigen::VectorXd(m.col(0));
    }
    std::vector<std::uint8_t> bytes() {
        std::vector<std::uint8_t> v(count(1));
        for (auto& b : v) b = u8();
        return v;
    }
    std::string_view take(std::size_t n) {
        need(n);
        const auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }
    [[noreturn]] void fail(const std::string& why) const {
        throw ParseError(what_ + ": " + why + " at byte " + std::to_string(pos_));
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) fail("truncated");
    }
    std::size_t count(std::size_t min_bytes_each) {
        const auto n = u64();
        if (n > (data_.size() - pos_) / min_bytes_each) fail("length field exceeds the data");
        return static_cast<std::size_t>(n);
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline void write_channel_stats(ByteWriter& w, const ChannelStats& s) {
    w.matrix(s.offset);
    w.matrix(s.scale);
    w.bytes(s.constant);
}

inline ChannelStats read_channel_stats(ByteReader& r) {
    ChannelStats s;
    s.offset = r.vector();
    s.scale = r.vector();
    s.constant = r.bytes();
    if (s.scale.size() != s.offset.size() || static_cast<Index>(s.constant.size()) != s.offset.size())
        r.fail("inconsistent normalization statistics");
    return s;
}

template <class P>
void write_tensors(ByteWriter& w, const P& params) {
    for_each_tensor(params, [&](const auto& t) { w.matrix(t); });
}

template <class P>
void read_tensors(ByteReader& r, P& params) {
    for_each_tensor(params, [&](auto& t) {
        const Eigen::MatrixXd m = r.matrix();
        if (m.rows() != t.rows() || m.cols() != t.cols()) r.fail("tensor shape does not match the model");
        t = m;
    });
}

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    using detail::ByteWriter;
    ByteWriter out;
    out.u8('M'), out.u8('S'), out.u8('G'), out.u8('N');
    out.u32(Checkpoint::kFormatVersion);
    auto section = [&](const char (&tag)[5], const ByteWriter& body) {
        for (int i = 0; i < 4; ++i) out.u8(static_cast<std::uint8_t>(tag[i]));
        out.u64(body.data().size());
        for (char c : body.data()) out.u8(static_cast<std::uint8_t>(c));
    };

    ByteWriter schema;
    schema.strings(ck.schema.data_channels);
    schema.strings(ck.schema.cond_channels);
    schema.u8(ck.schema.label_channel.has_value());
    schema.str(ck.schema.label_channel.value_or(""));
    schema.u8(ck.schema.categorical_cond);
    section("SCHM", schema);

    ByteWriter norm;
    norm.u8(static_cast<std::uint8_t>(ck.norm.mode));
    detail::write_channel_stats(norm, ck.norm.data);
    detail::write_channel_stats(norm, ck.norm.cond);
    norm.u8(ck.norm.cond_passthrough);
    section("NORM", norm);

    ByteWriter config;
    config.str(format_train_config(ck.config));
    section("CONF", config);

    ByteWriter gen;
    gen.u64(static_cast<std::uint64_t>(ck.model.data_dim()));
    gen.u64(static_cast<std::uint64_t>(ck.model.cond_dim()));
    gen.u64(static_cast<std::uint64_t>(ck.model.hidden_dim()));
    gen.u8(ck.model.decoder_feedback);
    detail::write_tensors(gen, ck.model);
    section("GENR", gen);

    ByteWriter disc;
    disc.u64(static_cast<std::uint64_t>(ck.disc.input_dim()));
    disc.u64(static_cast<std::uint64_t>(ck.disc.hidden_dim()));
    detail::write_tensors(disc, ck.disc);
    section("DISC", disc);

    ByteWriter pca;
    pca.matrix(ck.projection.mean);
    pca.matrix(ck.projection.components);
    pca.matrix(ck.projection.explained_variance);
    section("PCA ", pca);

    ByteWriter segs;
    segs.u64(ck.segments.size());
    for (const auto& s : ck.segments) segs.i64(s.begin), segs.i64(s.length);
    segs.i64(ck.scoring_window);
    section("SEGS", segs);

    ByteWriter log;
    log.u64(ck.log.epochs.size());
    for (const auto& e : ck.log.epochs) {
        log.i64(e.phase);
        log.i64(e.epoch);
        log.f64(e.lr);
        log.f64(e.loss_g);
        log.f64(e.loss_d);
    }
    log.u64(ck.log.segmentations.size());
    for (const auto& cuts : ck.log.segmentations) {
        log.u64(cuts.size());
        for (auto c : cuts) log.i64(c);
    }
    log.u8(ck.log.converged);
    section("TLOG", log);
    return out.data();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    detail::ByteReader in(bytes, what);
    if (in.take(4) != "MSGN") in.fail("not a checkpoint (bad magic)");
    const auto version = in.u32();
    if (version != Checkpoint::kFormatVersion) in.fail("unsupported format version " + std::to_string(version));
    auto section = [&](std::string_view tag) {
        if (in.take(4) != tag) in.fail("expected section '" + std::string(tag) + "'");
        const auto n = in.u64();
        if (n > bytes.size()) in.fail("section length exceeds the file");
        return detail::ByteReader(in.take(static_cast<std::size_t>(n)), what + " section " + std::string(tag));
    };
    auto finish = [](detail::ByteReader& r) {
        if (!r.done()) r.fail("trailing bytes");
    };

    Checkpoint ck;
    {
        auto r = section("SCHM");
        ck.schema.data_channels = r.strings();
        ck.schema.cond_channels = r.strings();
        const bool has_label = r.u8() != 0;
        auto label = r.str();
        if (has_label) ck.schema.label_channel = std::move(label);
        ck.schema.categorical_cond = r.u8() != 0;
        finish(r);
    }
    {
        auto r = section("NORM");
        const auto mode = r.u8();
        if (mode > 1) r.fail("unknown normalization mode");
        ck.norm.mode = static_cast<NormMode>(mode);
        ck.norm.data = detail::read_channel_stats(r);
        ck.norm.cond = detail::read_channel_stats(r);
        ck.norm.cond_passthrough = r.u8() != 0;
        finish(r);
    }
    {
        auto r = section("CONF");
        std::istringstream text(r.str());
        apply_train_config(ck.config, parse_key_values(text, what));
        finish(r);
    }
    {
        auto r = section("GENR");
        const auto M = static_cast<Index>(r.u64()), C = static_cast<Index>(r.u64()), H = static_cast<Index>(r.u64());
        if (M < 1 || C < 0 || H < 1 || M > 1'000'000 || C > 1'000'000 || H > 100'000) r.fail("bad model dimensions");
        const bool feedback = r.u8() != 0;
        ck.model = ReconstructionModel::zeros(M, C, H, feedback);
        detail::read_tensors(r, ck.model);
        finish(r);
    }
    {
        auto r = section("DISC");
        const auto I = static_cast<Index>(r.u64()), H = static_cast<Index>(r.u64());
        if (I < 1 || H < 1 || I > 2'000'000 || H > 100'000) r.fail("bad discriminator dimensions");
        ck.disc = DiscriminatorParams::zeros(I, H);
        detail::read_tensors(r, ck.disc);
        finish(r);
    }
    {
        auto r = section("PCA ");
        ck.projection.mean = r.vector();
        ck.projection.components = r.matrix();
        ck.projection.explained_variance = r.vector();
        finish(r);
    }
    {
        auto r = section("SEGS");
        const auto n = r.u64();
        if (n > bytes.size() / 16) r.fail("segment count exceeds the data");
        for (std::uint64_t i = 0; i < n; ++i) {
            const auto b = r.i64();
            const auto l = r.i64();
            ck.segments.push_back({b, l});
        }
        ck.scoring_window = r.i64();
        finish(r);
    }
    {
        auto r = section("TLOG");
        const auto n = r.u64();
        if (n > bytes.size() / 40) r.fail("epoch count exceeds the data");
        for (std::uint64_t i = 0; i < n; ++i) {
            EpochRecord e;
            e.phase = static_cast<int>(r.i64());
            e.epoch = r.i64();
            e.lr = r.f64();
            e.loss_g = r.f64();
            e.loss_d = r.f64();
            ck.log.epochs.push_back(e);
        }
        const auto m = r.u64();
        if (m > bytes.size() / 8) r.fail("segmentation count exceeds the data");
        for (std::uint64_t i = 0; i < m; ++i) {
            const auto k = r.u64();
            if (k > bytes.size() / 8) r.fail("cut count exceeds the data");
            std::vector<Index> cuts;
            for (std::uint64_t j = 0; j < k; ++j) cuts.push_back(r.i64());
            ck.log.segmentations.push_back(std::move(cuts));
        }
        ck.log.converged = r.u8() != 0;
        finish(r);
    }
    if (!in.done()) in.fail("trailing bytes after the last section");
    if (ck.disc.input_dim() != ck.model.encoder.input_dim()) throw ParseError(what + ": discriminator does not match model");
    if (ck.model.data_dim() != ck.schema.data_dim() || ck.model.cond_dim() != ck.schema.cond_dim())
        throw ParseError(what + ": model does not match schema");
    if (ck.scoring_window < 1) throw ParseError(what + ": scoring window must be positive");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write " + path);
    const auto bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ParseError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str(), path);
}

} // namespace missgan
