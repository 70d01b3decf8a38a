#pragma once

// Binary classification metrics. "Positive" is the corrosion class; scores
// are corrosion probabilities.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"

namespace rustseg {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Undefined ratios (zero denominator) are empty optionals.
struct ScalarMetrics {
    std::optional<double> accuracy, precision, recall, f1;
};

struct MetricsReport {
    ScalarMetrics scalars;
    std::optional<double> auc;
    ConfusionCounts counts;
};

/// labels: 1 = corrosion (positive), 0 = not-corrosion. Predicted positive iff score > threshold.
inline ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
    if (scores.size() != labels.size()) {
        throw DimensionError("confusion: " + std::to_string(scores.size()) + " scores vs " +
                             std::to_string(labels.size()) + " labels");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] > threshold;
        const bool pos = labels[i] != 0;
        if (pred && pos) ++c.tp;
        else if (pred) ++c.fp;
        else if (pos) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline std::optional<double> ratio(double num, double den) {
    if (den == 0.0) return std::nullopt;
    return num / den;
}

inline std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall) {
    if (!precision || !recall) return std::nullopt;
    return ratio(2.0 * *precision * *recall, *precision + *recall);
}

inline ScalarMetrics scalar_metrics(const ConfusionCounts& c) {
    ScalarMetrics m;
    m.accuracy = ratio(double(c.tp + c.tn), double(c.total()));
    m.precision = ratio(double(c.tp), double(c.tp + c.fp));
    m.recall = ratio(double(c.tp), double(c.tp + c.fn));
    m.f1 = f1_score(m.precision, m.recall);
    return m;
}

/// Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2.
inline double auc_roc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DimensionError("auc_roc: length mismatch");
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

    std::size_t n_pos = 0;
    for (int l : labels) n_pos += l != 0;
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ConfigError("auc_roc needs at least one positive and one negative");

    // sum of midranks of the positives
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double mid = 0.5 * (double(i + 1) + double(j));
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]] != 0) rank_sum += mid;
        }
        i = j;
    }
    const double u = rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

inline MetricsReport evaluate(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
    MetricsReport r;
    r.counts = confusion(scores, labels, threshold);
    r.scalars = scalar_metrics(r.counts);
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    if (pos > 0 && pos < labels.size()) r.auc = auc_roc(scores, labels);
    return r;
}

/// Aligned two-column table with the usual row names.
inline std::string format_metrics_table(const MetricsReport& r) {
    const auto cell = [](std::optional<double> v) {
        if (!v) return std::string("undefined");
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << *v * 100.0 << "%";
        return os.str();
    };
    const std::pair<const char*, std::optional<double>> rows[] = {
        {"Accuracy", r.scalars.accuracy}, {"Area Under Curve", r.auc}, {"Precision", r.scalars.precision},
        {"Recall", r.scalars.recall},     {"F1", r.scalars.f1},
    };
    std::ostringstream os;
    os << std::left << std::setw(18) << "Parameter" << "Score\n";
    for (const auto& [name, v] : rows) os << std::left << std::setw(18) << name << cell(v) << "\n";
    return os.str();
}

/// Undefined values are emitted as null.
inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    const auto val = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {
        {"accuracy", val(r.scalars.accuracy)},
        {"auc", val(r.auc)},
        {"precision", val(r.scalars.precision)},
        {"recall", val(r.scalars.recall)},
        {"f1", val(r.scalars.f1)},
        {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
    };
}

}  // namespace rustseg
