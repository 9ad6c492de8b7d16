#pragma once

// Multivariate time series with separate data and conditional channels,
// CSV ingestion, per-channel normalization, and coarse windowing.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missgan/error.hpp"
#include "missgan/keyvalue.hpp"

namespace missgan {

using Index = Eigen::Index;

struct ChannelSchema {
    std::vector<std::string> data_channels;
    std::vector<std::string> cond_channels;
    std::optional<std::string> label_channel;
    /// Categorical conditional channels are left untouched by normalization.
    bool categorical_cond = false;

    Index data_dim() const { return static_cast<Index>(data_channels.size()); }
    Index cond_dim() const { return static_cast<Index>(cond_channels.size()); }

    void validate() const {
        if (data_channels.empty()) throw SchemaError("schema has no data channels");
        std::set<std::string> seen;
        auto claim = [&](const std::string& name) {
            if (name.empty()) throw SchemaError("empty channel name");
            if (!seen.insert(name).second) throw SchemaError("channel '" + name + "' listed more than once");
        };
        for (const auto& c : data_channels) claim(c);
        for (const auto& c : cond_channels) claim(c);
        if (label_channel) claim(*label_channel);
    }

    bool operator==(const ChannelSchema&) const = default;
};

/// x is T x M, y is T x C; labels is either empty or has T entries in {0,1}.
struct TimeSeries {
    ChannelSchema schema;
    Eigen::MatrixXd x;
    Eigen::MatrixXd y;
    std::vector<std::uint8_t> labels;

    Index length() const { return x.rows(); }
    Index data_dim() const { return x.cols(); }
    Index cond_dim() const { return y.cols(); }
    bool has_labels() const { return !labels.empty(); }

    void validate() const {
        schema.validate();
        if (x.cols() != schema.data_dim() || y.cols() != schema.cond_dim())
            throw ShapeError("time series columns do not match its schema");
        if (y.rows() != x.rows()) throw ShapeError("data and conditional channels differ in length");
        if (!labels.empty() && static_cast<Index>(labels.size()) != x.rows())
            throw ShapeError("label vector length differs from series length");
        if (!x.allFinite() || !y.allFinite()) throw NumericError("time series contains non-finite values");
    }

    TimeSeries slice(Index begin, Index count) const {
        TimeSeries out;
        out.schema = schema;
        out.x = x.middleRows(begin, count);
        out.y = y.middleRows(begin, count);
        if (!labels.empty()) out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
        return out;
    }

    bool operator==(const TimeSeries& o) const {
        return schema == o.schema && x.rows() == o.x.rows() && x.cols() == o.x.cols() && y.rows() == o.y.rows() &&
               y.cols() == o.y.cols() && x == o.x && y == o.y && labels == o.labels;
    }
};

namespace detail {

inline double parse_cell(std::string_view cell, std::size_t row, const std::string& column) {
    const auto t = trim(cell);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size() || !std::isfinite(v))
        throw ParseError("row " + std::to_string(row) + ", column '" + column + "': not a finite number: '" +
                         std::string(cell) + "'");
    return v;
}

} // namespace detail

/// Reads a comma-separated file with a header row. Columns are selected and
/// ordered by the schema; extra columns are ignored.
inline TimeSeries load_csv(std::istream& in, const ChannelSchema& schema, std::string_view source = "<stream>") {
    schema.validate();
    std::string line;
    if (!std::getline(in, line) || trim(line).empty())
        throw ParseError(std::string(source) + ": empty file");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3); // UTF-8 BOM
    auto header = split(line, ',');
    for (auto& h : header) h = std::string(trim(h));

    auto column_of = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw SchemaError("column '" + name + "' not found in " + std::string(source));
        return static_cast<std::size_t>(it - header.begin());
    };
    std::vector<std::size_t> data_cols, cond_cols;
    for (const auto& c : schema.data_channels) data_cols.push_back(column_of(c));
    for (const auto& c : schema.cond_channels) cond_cols.push_back(column_of(c));
    std::optional<std::size_t> label_col;
    if (schema.label_channel) label_col = column_of(*schema.label_channel);

    std::vector<double> xs, ys;
    std::vector<std::uint8_t> labels;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size())
            throw ParseError(std::string(source) + ": row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, header has " + std::to_string(header.size()));
        for (std::size_t i = 0; i < data_cols.size(); ++i)
            xs.push_back(detail::parse_cell(cells[data_cols[i]], row, schema.data_channels[i]));
        for (std::size_t i = 0; i < cond_cols.size(); ++i)
            ys.push_back(detail::parse_cell(cells[cond_cols[i]], row, schema.cond_channels[i]));
        if (label_col) {
            const double v = detail::parse_cell(cells[*label_col], row, *schema.label_channel);
            if (v != 0.0 && v != 1.0)
                throw ParseError("row " + std::to_string(row) + ": label must be 0 or 1");
            labels.push_back(static_cast<std::uint8_t>(v));
        }
    }
    const auto T = static_cast<Index>(xs.size() / data_cols.size());
    if (T == 0) throw ParseError(std::string(source) + ": no data rows");

    TimeSeries ts;
    ts.schema = schema;
    ts.x = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        xs.data(), T, schema.data_dim());
    ts.y.resize(T, schema.cond_dim());
    if (schema.cond_dim() > 0)
        ts.y = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            ys.data(), T, schema.cond_dim());
    ts.labels = std::move(labels);
    return ts;
}

inline TimeSeries load_csv(const std::string& path, const ChannelSchema& schema) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    return load_csv(in, schema, path);
}

/// Header names of a CSV file, in file order.
inline std::vector<std::string> read_csv_header(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || trim(line).empty()) throw ParseError(path + ": empty file");
    auto header = split(line, ',');
    for (auto& h : header) h = std::string(trim(h));
    return header;
}

/// Columns are written data, then conditional, then label. Values use the
/// shortest exact decimal form, so a save/load round trip is lossless.
inline void save_csv(std::ostream& out, const TimeSeries& ts) {
    bool first = true;
    auto sep = [&] {
        if (!first) out << ',';
        first = false;
    };
    for (const auto& c : ts.schema.data_channels) sep(), out << c;
    for (const auto& c : ts.schema.cond_channels) sep(), out << c;
    if (ts.schema.label_channel && ts.has_labels()) sep(), out << *ts.schema.label_channel;
    out << '\n';
    for (Index t = 0; t < ts.length(); ++t) {
        first = true;
        for (Index j = 0; j < ts.x.cols(); ++j) sep(), out << format_double(ts.x(t, j));
        for (Index j = 0; j < ts.y.cols(); ++j) sep(), out << format_double(ts.y(t, j));
        if (ts.schema.label_channel && ts.has_labels()) sep(), out << int(ts.labels[static_cast<std::size_t>(t)]);
        out << '\n';
    }
}

inline void save_csv(const std::string& path, const TimeSeries& ts) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path);
    save_csv(out, ts);
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode : std::uint8_t { MinMax = 0, ZScore = 1 };

/// Per-channel affine statistics fit on training data. For min-max, `offset`
/// is the min and `scale` is max - min; for z-score they are mean and
/// population standard deviation.
struct ChannelStats {
    Eigen::VectorXd offset;
    Eigen::VectorXd scale;
    std::vector<std::uint8_t> constant;

    bool operator==(const ChannelStats& o) const {
        return offset.size() == o.offset.size() && offset == o.offset && scale == o.scale && constant == o.constant;
    }
};

struct NormStats {
    NormMode mode = NormMode::MinMax;
    ChannelStats data;
    ChannelStats cond;
    bool cond_passthrough = false;

    bool operator==(const NormStats&) const = default;
};

namespace detail {

inline ChannelStats fit_channels(const Eigen::MatrixXd& m, NormMode mode) {
    ChannelStats s;
    const Index n = m.cols();
    s.offset.resize(n);
    s.scale.resize(n);
    s.constant.assign(static_cast<std::size_t>(n), 0);
    for (Index j = 0; j < n; ++j) {
        const auto col = m.col(j);
        if (mode == NormMode::MinMax) {
            s.offset(j) = col.minCoeff();
            s.scale(j) = col.maxCoeff() - s.offset(j);
            s.constant[static_cast<std::size_t>(j)] = s.scale(j) == 0.0;
        } else {
            const double mean = col.mean();
            const double var = (col.array() - mean).square().sum() / static_cast<double>(col.size());
            s.offset(j) = mean;
            s.scale(j) = std::sqrt(var);
            s.constant[static_cast<std::size_t>(j)] = s.scale(j) == 0.0;
        }
    }
    return s;
}

inline Eigen::MatrixXd apply_channels(const Eigen::MatrixXd& m, const ChannelStats& s) {
    if (m.cols() != s.offset.size()) throw ShapeError("channel count does not match normalization stats");
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (Index j = 0; j < m.cols(); ++j) {
        if (s.constant[static_cast<std::size_t>(j)])
            out.col(j).setZero();
        else
            out.col(j) = (m.col(j).array() - s.offset(j)) / s.scale(j);
    }
    return out;
}

inline Eigen::MatrixXd invert_channels(const Eigen::MatrixXd& m, const ChannelStats& s) {
    if (m.cols() != s.offset.size()) throw ShapeError("channel count does not match normalization stats");
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (Index j = 0; j < m.cols(); ++j) {
        if (s.constant[static_cast<std::size_t>(j)])
            out.col(j).setConstant(s.offset(j));
        else
            out.col(j) = m.col(j).array() * s.scale(j) + s.offset(j);
    }
    return out;
}

} // namespace detail

inline NormStats normalize_fit(const TimeSeries& train, NormMode mode = NormMode::MinMax) {
    if (train.length() < 1) throw ShapeError("cannot fit normalization on an empty series");
    NormStats stats;
    stats.mode = mode;
    stats.data = detail::fit_channels(train.x, mode);
    stats.cond_passthrough = train.schema.categorical_cond;
    stats.cond = detail::fit_channels(train.y, mode);
    return stats;
}

inline TimeSeries normalize_apply(const TimeSeries& series, const NormStats& stats) {
    TimeSeries out = series;
    out.x = detail::apply_channels(series.x, stats.data);
    if (!stats.cond_passthrough) out.y = detail::apply_channels(series.y, stats.cond);
    else if (series.y.cols() != stats.cond.offset.size())
        throw ShapeError("conditional channel count does not match normalization stats");
    return out;
}

/// Maps normalized values back to the original units. Constant channels come
/// back as their training constant.
inline TimeSeries normalize_invert(const TimeSeries& series, const NormStats& stats) {
    TimeSeries out = series;
    out.x = detail::invert_channels(series.x, stats.data);
    if (!stats.cond_passthrough) out.y = detail::invert_channels(series.y, stats.cond);
    return out;
}

// ---------------------------------------------------------------------------
// Windows

struct SegmentBounds {
    Index begin = 0;
    Index length = 0;

    Index end() const { return begin + length; }
    bool operator==(const SegmentBounds&) const = default;
};

/// Consecutive windows of l_init ticks. A trailing remainder shorter than
/// l_init / 2 is merged into the previous window.
inline std::vector<SegmentBounds> coarse_segment(Index T, Index l_init) {
    if (l_init < 2) throw ConfigError("l_init must be at least 2");
    if (T < 2) throw ShapeError("series must have at least 2 ticks to segment");
    std::vector<SegmentBounds> out;
    Index begin = 0;
    while (T - begin >= l_init) {
        out.push_back({begin, l_init});
        begin += l_init;
    }
    const Index rest = T - begin;
    if (rest > 0) {
        if (out.empty() || 2 * rest >= l_init)
            out.push_back({begin, rest});
        else
            out.back().length += rest;
    }
    return out;
}

inline std::vector<SegmentBounds> coarse_segment(const TimeSeries& series, Index l_init) {
    return coarse_segment(series.length(), l_init);
}

inline std::vector<Index> cut_points_of(const std::vector<SegmentBounds>& segments) {
    std::vector<Index> cuts;
    cuts.reserve(segments.size());
    for (const auto& s : segments) cuts.push_back(s.begin);
    return cuts;
}

} // namespace missgan
