#pragma once

// Object-level Dice, F1 and Hausdorff metrics and competition rank sums.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "instance.hpp"

namespace prs2 {

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct Pixel {
    int row = 0;
    int col = 0;
    friend bool operator==(const Pixel&, const Pixel&) = default;
};

using PixelSet = std::vector<Pixel>;

/// Symmetric Hausdorff distance between pixel-centre sets (Euclidean).
/// Uses the early-break scan: a point's inner loop stops as soon as it finds
/// a neighbour closer than the running maximum.
inline double hausdorff_distance(const PixelSet& a, const PixelSet& b)
{
    if (a.empty() || b.empty()) {
        throw DomainError("hausdorff_distance: empty pixel set (|a|=" + std::to_string(a.size()) +
                          ", |b|=" + std::to_string(b.size()) + ")");
    }
    auto directed = [](const PixelSet& from, const PixelSet& to, double cmax) {
        for (const Pixel& p : from) {
            double cmin = std::numeric_limits<double>::infinity();
            for (const Pixel& q : to) {
                const double dr = p.row - q.row, dc = p.col - q.col;
                const double d2 = dr * dr + dc * dc;
                if (d2 < cmin) {
                    cmin = d2;
                    if (cmin <= cmax) break;
                }
            }
            cmax = std::max(cmax, cmin);
        }
        return cmax;
    };
    const double sq = directed(b, a, directed(a, b, 0.0));
    return std::sqrt(sq);
}

enum class HausdorffMode { Boundary, Region };

/// Pixels of `label`; in Boundary mode only those with a non-object pixel
/// (or the image edge) among their 8 neighbours.
inline PixelSet instance_pixels(const InstanceMap& map, int label, HausdorffMode mode = HausdorffMode::Boundary)
{
    PixelSet out;
    const auto h = static_cast<int>(map.height()), w = static_cast<int>(map.width());
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (map(r, c) != label) continue;
            bool keep = mode == HausdorffMode::Region;
            for (int dr = -1; dr <= 1 && !keep; ++dr) {
                for (int dc = -1; dc <= 1 && !keep; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= h || cc >= w || map(rr, cc) != label) keep = true;
                }
            }
            if (keep) out.push_back({r, c});
        }
    }
    return out;
}

inline double dice_coefficient(std::int64_t intersection, std::int64_t area_a, std::int64_t area_b)
{
    if (area_a + area_b == 0) return 1.0;
    return 2.0 * static_cast<double>(intersection) / static_cast<double>(area_a + area_b);
}

/// Area-weighted two-directional object Dice. Unmatched instances score 0;
/// two empty maps score 1.
inline double object_dice(const InstanceMap& pred, const InstanceMap& gt)
{
    const MatchResult m = match_instances(pred, gt);
    if (pred.empty() && gt.empty()) return 1.0;
    double pred_side = 0.0;
    for (std::size_t i = 0; i < m.pred_to_gt.size(); ++i) {
        if (!m.pred_to_gt[i]) continue;
        const std::size_t j = *m.pred_to_gt[i];
        pred_side += m.pred_weights[i] * dice_coefficient(m.overlaps(i, j), m.pred_areas[i], m.gt_areas[j]);
    }
    double gt_side = 0.0;
    for (std::size_t j = 0; j < m.gt_to_pred.size(); ++j) {
        if (!m.gt_to_pred[j]) continue;
        const std::size_t i = *m.gt_to_pred[j];
        gt_side += m.gt_weights[j] * dice_coefficient(m.overlaps(i, j), m.pred_areas[i], m.gt_areas[j]);
    }
    return 0.5 * (pred_side + gt_side);
}

struct DetectionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;

    DetectionCounts& operator+=(const DetectionCounts& o)
    {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

inline double f1_from_counts(const DetectionCounts& c)
{
    const auto denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// A prediction is a candidate when it covers more than threshold * |G| of
/// its maximally-overlapping GT object. Each GT object validates at most one
/// candidate: largest overlap first, then smallest index.
inline DetectionCounts detection_counts(const InstanceMap& pred, const InstanceMap& gt, double overlap_threshold = 0.5)
{
    if (!(overlap_threshold > 0.0 && overlap_threshold <= 1.0)) {
        throw std::invalid_argument("overlap threshold must lie in (0, 1], got " + std::to_string(overlap_threshold));
    }
    const MatchResult m = match_instances(pred, gt);
    std::vector<std::optional<std::size_t>> validated_by(gt.count());
    for (std::size_t i = 0; i < m.pred_to_gt.size(); ++i) {
        if (!m.pred_to_gt[i]) continue;
        const std::size_t j = *m.pred_to_gt[i];
        const auto ov = m.overlaps(i, j);
        if (static_cast<double>(ov) <= overlap_threshold * static_cast<double>(m.gt_areas[j])) continue;
        if (!validated_by[j] || ov > m.overlaps(*validated_by[j], j)) validated_by[j] = i;
    }
    DetectionCounts c;
    c.tp = std::count_if(validated_by.begin(), validated_by.end(), [](const auto& v) { return v.has_value(); });
    c.fp = static_cast<std::int64_t>(pred.count()) - c.tp;
    c.fn = static_cast<std::int64_t>(gt.count()) - c.tp;
    return c;
}

inline double object_f1(const InstanceMap& pred, const InstanceMap& gt, double overlap_threshold = 0.5)
{
    return f1_from_counts(detection_counts(pred, gt, overlap_threshold));
}

/// Area-weighted two-directional object Hausdorff. An unmatched instance is
/// scored against the counterpart with the smallest Hausdorff distance.
inline double object_hausdorff(const InstanceMap& pred, const InstanceMap& gt,
                               HausdorffMode mode = HausdorffMode::Boundary)
{
    if (pred.empty() || gt.empty()) {
        throw DomainError("object_hausdorff needs at least one instance per side (pred " +
                          std::to_string(pred.count()) + ", gt " + std::to_string(gt.count()) + ")");
    }
    const MatchResult m = match_instances(pred, gt);
    std::vector<PixelSet> ps, gs;
    for (std::size_t i = 1; i <= pred.count(); ++i) ps.push_back(instance_pixels(pred, static_cast<int>(i), mode));
    for (std::size_t j = 1; j <= gt.count(); ++j) gs.push_back(instance_pixels(gt, static_cast<int>(j), mode));

    // Lazily filled pairwise distances: unmatched instances need a full row/column.
    std::vector<std::optional<double>> cache(ps.size() * gs.size());
    auto dist = [&](std::size_t i, std::size_t j) {
        auto& slot = cache[i * gs.size() + j];
        if (!slot) slot = hausdorff_distance(ps[i], gs[j]);
        return *slot;
    };

    double pred_side = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        double d;
        if (m.pred_to_gt[i]) {
            d = dist(i, *m.pred_to_gt[i]);
        } else {
            d = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < gs.size(); ++j) d = std::min(d, dist(i, j));
        }
        pred_side += m.pred_weights[i] * d;
    }
    double gt_side = 0.0;
    for (std::size_t j = 0; j < gs.size(); ++j) {
        double d;
        if (m.gt_to_pred[j]) {
            d = dist(*m.gt_to_pred[j], j);
        } else {
            d = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < ps.size(); ++i) d = std::min(d, dist(i, j));
        }
        gt_side += m.gt_weights[j] * d;
    }
    return 0.5 * (pred_side + gt_side);
}

// ---------------------------------------------------------------- reports

struct ImageMetrics {
    std::string name;
    double obj_dice = 0.0;
    double obj_f1 = 0.0;
    /// nullopt when one side has no instances (Hausdorff undefined).
    std::optional<double> obj_hausdorff;
    DetectionCounts counts;
};

struct MetricOptions {
    double overlap_threshold = 0.5;
    HausdorffMode hausdorff_mode = HausdorffMode::Boundary;
};

inline ImageMetrics evaluate_image(std::string name, const InstanceMap& pred, const InstanceMap& gt,
                                   const MetricOptions& opt = {})
{
    ImageMetrics im;
    im.name = std::move(name);
    im.obj_dice = object_dice(pred, gt);
    im.counts = detection_counts(pred, gt, opt.overlap_threshold);
    im.obj_f1 = f1_from_counts(im.counts);
    if (!pred.empty() && !gt.empty()) im.obj_hausdorff = object_hausdorff(pred, gt, opt.hausdorff_mode);
    return im;
}

struct MetricReport {
    double obj_dice = 0.0;
    double obj_f1 = 0.0;
    /// Mean over images where Obj-H is defined; NaN when none are.
    double obj_hausdorff = 0.0;
    std::vector<ImageMetrics> per_image;
    DetectionCounts counts;
};

/// Aggregates are per-image means accumulated in list order; counts are summed.
inline MetricReport aggregate(std::vector<ImageMetrics> images)
{
    MetricReport rep;
    rep.per_image = std::move(images);
    double hsum = 0.0;
    std::size_t hn = 0;
    for (const auto& im : rep.per_image) {
        rep.obj_dice += im.obj_dice;
        rep.obj_f1 += im.obj_f1;
        rep.counts += im.counts;
        if (im.obj_hausdorff) {
            hsum += *im.obj_hausdorff;
            ++hn;
        }
    }
    if (!rep.per_image.empty()) {
        rep.obj_dice /= static_cast<double>(rep.per_image.size());
        rep.obj_f1 /= static_cast<double>(rep.per_image.size());
    }
    rep.obj_hausdorff = hn ? hsum / static_cast<double>(hn) : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

inline nlohmann::json to_json(const MetricReport& rep)
{
    using nlohmann::json;
    auto h = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    json images = json::array();
    for (const auto& im : rep.per_image) {
        images.push_back({{"image", im.name},
                          {"obj_dice", im.obj_dice},
                          {"obj_f1", im.obj_f1},
                          {"obj_hausdorff", im.obj_hausdorff ? json(*im.obj_hausdorff) : json(nullptr)},
                          {"tp", im.counts.tp},
                          {"fp", im.counts.fp},
                          {"fn", im.counts.fn}});
    }
    return {{"aggregate",
             {{"obj_dice", rep.obj_dice},
              {"obj_f1", rep.obj_f1},
              {"obj_hausdorff", h(rep.obj_hausdorff)},
              {"tp", rep.counts.tp},
              {"fp", rep.counts.fp},
              {"fn", rep.counts.fn},
              {"images", rep.per_image.size()}}},
            {"per_image", images}};
}

inline void write_csv(std::ostream& os, const MetricReport& rep)
{
    os << "image,obj_dice,obj_f1,obj_hausdorff,tp,fp,fn\n";
    os.precision(17);
    for (const auto& im : rep.per_image) {
        os << im.name << ',' << im.obj_dice << ',' << im.obj_f1 << ',';
        if (im.obj_hausdorff) os << *im.obj_hausdorff;
        os << ',' << im.counts.tp << ',' << im.counts.fp << ',' << im.counts.fn << '\n';
    }
}

// ---------------------------------------------------------------- ranking

enum class Direction { HigherIsBetter, LowerIsBetter };

struct RankRow {
    std::string model;
    std::vector<double> values;
    std::vector<int> ranks;
    int rank_sum = 0;
};

struct RankTable {
    std::vector<std::string> metric_names;
    std::vector<RankRow> rows;
};

/// Competition ranking ("1224"): tied values share the smaller rank and the
/// following rank skips by the tie size.
inline std::vector<int> competition_ranks(const std::vector<double>& values, Direction dir)
{
    std::vector<int> ranks(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        int better = 0;
        for (double v : values) {
            if (dir == Direction::HigherIsBetter ? v > values[i] : v < values[i]) ++better;
        }
        ranks[i] = better + 1;
    }
    return ranks;
}

struct ModelScores {
    std::string model;
    std::vector<std::optional<double>> values;
};

inline RankTable rank_sum(const std::vector<ModelScores>& table, const std::vector<std::string>& metric_names,
                          const std::vector<Direction>& directions)
{
    if (metric_names.size() != directions.size()) throw std::invalid_argument("rank_sum: one direction per metric");
    RankTable out;
    out.metric_names = metric_names;
    for (const auto& m : table) {
        if (m.values.size() != metric_names.size()) {
            throw std::invalid_argument("rank_sum: model '" + m.model + "' has " + std::to_string(m.values.size()) +
                                        " values, expected " + std::to_string(metric_names.size()));
        }
        RankRow row{m.model, {}, {}, 0};
        for (std::size_t k = 0; k < m.values.size(); ++k) {
            if (!m.values[k] || !std::isfinite(*m.values[k])) {
                throw std::invalid_argument("rank_sum: model '" + m.model + "' is missing a value for " +
                                            metric_names[k]);
            }
            row.values.push_back(*m.values[k]);
        }
        out.rows.push_back(std::move(row));
    }
    for (auto& r : out.rows) r.ranks.resize(metric_names.size());
    for (std::size_t k = 0; k < metric_names.size(); ++k) {
        std::vector<double> col;
        for (const auto& r : out.rows) col.push_back(r.values[k]);
        const auto ranks = competition_ranks(col, directions[k]);
        for (std::size_t i = 0; i < out.rows.size(); ++i) out.rows[i].ranks[k] = ranks[i];
    }
    for (auto& r : out.rows) {
        r.rank_sum = 0;
        for (int x : r.ranks) r.rank_sum += x;
    }
    return out;
}

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') quoted = !quoted;
        else if (ch == ',' && !quoted) {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    for (auto& f : fields) {
        const auto b = f.find_first_not_of(" \t"), e = f.find_last_not_of(" \t");
        f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
    }
    return fields;
}

} // namespace detail

/// Reads a score table with a header naming `model` and each of `metric_names`
/// (any column order, extra columns ignored). An empty cell is a missing value.
inline std::vector<ModelScores> parse_scores_csv(std::istream& is, const std::vector<std::string>& metric_names,
                                                 const std::string& origin = "csv")
{
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (header.empty() && std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        header = detail::split_csv_line(line);
    }
    auto where = [&](std::size_t n) { return origin + ":" + std::to_string(n) + ": "; };
    if (header.empty()) throw ParseError(origin + ": empty input");
    auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ParseError(where(line_no) + "header lacks column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t model_col = column("model");
    std::vector<std::size_t> cols;
    for (const auto& m : metric_names) cols.push_back(column(m));

    std::vector<ModelScores> out;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError(where(line_no) + "expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        }
        ModelScores row{fields[model_col], {}};
        if (row.model.empty()) throw ParseError(where(line_no) + "empty model name");
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const std::string& cell = fields[cols[k]];
            if (cell.empty()) {
                row.values.emplace_back();
                continue;
            }
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cell.size() || !std::isfinite(v)) {
                throw ParseError(where(line_no) + "bad number '" + cell + "' in column " + metric_names[k]);
            }
            row.values.emplace_back(v);
        }
        out.push_back(std::move(row));
    }
    return out;
}

/// Obj-D and Obj-F higher-is-better, Obj-H lower-is-better.
inline RankTable rank_sum_objects(const std::vector<ModelScores>& table)
{
    return rank_sum(table, {"obj_d", "obj_f", "obj_h"},
                    {Direction::HigherIsBetter, Direction::HigherIsBetter, Direction::LowerIsBetter});
}

/// Columns: model, then metric value (M) and rank (R) per metric, then rank_sum.
inline void write_csv(std::ostream& os, const RankTable& t)
{
    os << "model";
    for (const auto& name : t.metric_names) os << ',' << name << "_m," << name << "_r";
    os << ",rank_sum\n";
    for (const auto& r : t.rows) {
        os << r.model;
        for (std::size_t k = 0; k < r.values.size(); ++k) {
            std::ostringstream v;
            v << r.values[k];
            os << ',' << v.str() << ',' << r.ranks[k];
        }
        os << ',' << r.rank_sum << '\n';
    }
}

} // namespace prs2
