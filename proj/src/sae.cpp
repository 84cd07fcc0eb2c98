#include "conlab/sae.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace conlab::sae {

void SaeWeights::validate() const {
    if (w_enc.rows != feature_count || w_enc.cols != hidden_dim) {
        throw ValidationError("sae: w_enc shape mismatch");
    }
    if (b_enc.size() != feature_count) throw ValidationError("sae: b_enc length mismatch");
    if (w_dec.rows != hidden_dim || w_dec.cols != feature_count) {
        throw ValidationError("sae: w_dec shape mismatch");
    }
    for (double v : w_enc.data) if (!std::isfinite(v)) throw ValidationError("sae: non-finite w_enc");
    for (double v : b_enc) if (!std::isfinite(v)) throw ValidationError("sae: non-finite b_enc");
    for (double v : w_dec.data) if (!std::isfinite(v)) throw ValidationError("sae: non-finite w_dec");
}

Vec encode(const Vec& h, const SaeWeights& sae) {
    if (h.size() != sae.hidden_dim) {
        throw ValidationError("sae encode: input has " + std::to_string(h.size()) +
                              " dims, expected " + std::to_string(sae.hidden_dim));
    }
    Vec f = matvec(sae.w_enc, h);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] += sae.b_enc[i];
        if (f[i] < 0.0) f[i] = 0.0;
    }
    return f;
}

Vec decode(const Vec& f, const SaeWeights& sae) {
    if (f.size() != sae.feature_count) {
        throw ValidationError("sae decode: input has " + std::to_string(f.size()) +
                              " features, expected " + std::to_string(sae.feature_count));
    }
    return matvec(sae.w_dec, f);
}

ReconStats reconstruction_stats(const records::ActivationMatrix& acts, const SaeWeights& sae,
                                double l0_epsilon) {
    if (acts.cols != sae.hidden_dim) throw ValidationError("reconstruction_stats: width mismatch");
    if (acts.rows < 2) throw ValidationError("reconstruction_stats: need at least 2 rows");

    struct RowStat {
        double r2 = 0.0;
        double l0 = 0.0;
        bool ok = false;
    };
    std::vector<RowStat> rowstats(acts.rows);

    parallel_for(acts.rows, [&](std::size_t r) {
        const Vec h = acts.row(r);
        double mean = 0.0;
        for (double v : h) mean += v;
        mean /= static_cast<double>(h.size());
        double var = 0.0;
        for (double v : h) var += (v - mean) * (v - mean);
        var /= static_cast<double>(h.size());
        if (var == 0.0) return;  // excluded

        const Vec f = encode(h, sae);
        const Vec hhat = decode(f, sae);
        double mse = 0.0;
        for (std::size_t c = 0; c < h.size(); ++c) mse += (h[c] - hhat[c]) * (h[c] - hhat[c]);
        mse /= static_cast<double>(h.size());

        std::size_t l0 = 0;
        for (double v : f) if (v > l0_epsilon) ++l0;

        rowstats[r] = {1.0 - mse / var, static_cast<double>(l0), true};
    });

    ReconStats out;
    double r2_sum = 0.0, l0_sum = 0.0;
    for (const auto& rs : rowstats) {
        if (!rs.ok) { ++out.excluded_rows; continue; }
        ++out.n;
        r2_sum += rs.r2;
        l0_sum += rs.l0;
    }
    if (out.n == 0) throw ValidationError("reconstruction_stats: all rows had zero variance");

    out.r2_mean = r2_sum / static_cast<double>(out.n);
    out.l0_mean = l0_sum / static_cast<double>(out.n);
    out.fvu = 1.0 - out.r2_mean;

    double r2_ss = 0.0, l0_ss = 0.0;
    for (const auto& rs : rowstats) {
        if (!rs.ok) continue;
        r2_ss += (rs.r2 - out.r2_mean) * (rs.r2 - out.r2_mean);
        l0_ss += (rs.l0 - out.l0_mean) * (rs.l0 - out.l0_mean);
    }
    if (out.n > 1) {
        out.r2_sd = std::sqrt(r2_ss / static_cast<double>(out.n - 1));
        out.l0_sd = std::sqrt(l0_ss / static_cast<double>(out.n - 1));
    }
    return out;
}

FeatureDelta feature_delta(const Vec& h_orig, const Vec& h_para, const SaeWeights& sae,
                           std::size_t top_k, const std::string& pair_id) {
    const Vec fo = encode(h_orig, sae);
    const Vec fp = encode(h_para, sae);

    FeatureDelta d;
    d.pair_id = pair_id;
    d.deltas.resize(sae.feature_count);
    for (std::size_t i = 0; i < sae.feature_count; ++i) d.deltas[i] = fo[i] - fp[i];

    std::vector<std::size_t> order(sae.feature_count);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(d.deltas[a]) > std::abs(d.deltas[b]);
    });
    const std::size_t k = std::min(top_k, order.size());
    d.top_k.reserve(k);
    for (std::size_t i = 0; i < k; ++i) d.top_k.emplace_back(order[i], d.deltas[order[i]]);
    return d;
}

GridSummary prompt_grid_summary(const std::map<std::string, std::vector<double>>& activations) {
    GridSummary g;
    for (const auto& [cat, vals] : activations) {
        if (vals.empty()) {
            ++g.empty_categories;
            continue;
        }
        GridRow row;
        row.category = cat;
        row.n = vals.size();
        row.min = vals.front();
        row.max = vals.front();
        double sum = 0.0;
        for (double v : vals) {
            sum += v;
            row.min = std::min(row.min, v);
            row.max = std::max(row.max, v);
        }
        row.mean = sum / static_cast<double>(vals.size());
        g.rows.push_back(std::move(row));
    }
    return g;
}

ResponseRate feature_response_rate(const std::vector<FeatureDelta>& deltas,
                                   std::size_t feature_id, double threshold) {
    if (deltas.empty()) throw ValidationError("feature_response_rate: no deltas");
    ResponseRate rr;
    rr.total = deltas.size();
    double sum_abs = 0.0;
    for (const auto& d : deltas) {
        if (feature_id >= d.deltas.size()) {
            throw ValidationError("feature_response_rate: feature_id out of range");
        }
        const double mag = std::abs(d.deltas[feature_id]);
        sum_abs += mag;
        if (mag > threshold) ++rr.responding;
    }
    rr.mean_abs_delta = sum_abs / static_cast<double>(rr.total);
    return rr;
}

SaeWeights make_signed_basis_sae(std::size_t hidden_dim) {
    Mat eye(hidden_dim, hidden_dim);
    for (std::size_t i = 0; i < hidden_dim; ++i) eye(i, i) = 1.0;
    return make_signed_basis_sae(eye);
}

SaeWeights make_signed_basis_sae(const Mat& basis) {
    if (basis.rows != basis.cols) throw ValidationError("signed basis sae: basis must be square");
    const std::size_t h = basis.rows;

    SaeWeights sae;
    sae.hidden_dim = h;
    sae.feature_count = 2 * h;
    sae.b_enc.assign(sae.feature_count, 0.0);
    sae.w_dec = Mat(h, 2 * h);
    sae.w_enc = Mat(2 * h, h);
    // atom i = column i of the basis; atom h+i = its negation
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t i = 0; i < h; ++i) {
            sae.w_dec(r, i) = basis(r, i);
            sae.w_dec(r, h + i) = -basis(r, i);
        }
    }
    for (std::size_t i = 0; i < 2 * h; ++i) {
        for (std::size_t c = 0; c < h; ++c) sae.w_enc(i, c) = sae.w_dec(c, i);
    }
    sae.validate();
    return sae;
}

SaeWeights load_sae(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ValidationError("cannot open SAE manifest: " + manifest_path);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(manifest_path + ": bad JSON: " + e.what());
    }
    for (const char* f : {"hidden_dim", "feature_count", "w_enc", "b_enc", "w_dec"}) {
        if (!m.contains(f)) throw ValidationError(manifest_path + ": missing '" + std::string(f) + "'");
    }

    const auto dir = std::filesystem::path(manifest_path).parent_path();
    const auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (dir / fp).string();
    };

    SaeWeights sae;
    sae.hidden_dim = m["hidden_dim"].get<std::size_t>();
    sae.feature_count = m["feature_count"].get<std::size_t>();
    sae.w_enc = records::activation_to_mat(
        records::read_activation_matrix(resolve(m["w_enc"].get<std::string>())));
    sae.w_dec = records::activation_to_mat(
        records::read_activation_matrix(resolve(m["w_dec"].get<std::string>())));
    const Mat b = records::activation_to_mat(
        records::read_activation_matrix(resolve(m["b_enc"].get<std::string>())));
    if (b.rows != 1) throw ValidationError("sae: b_enc file must be a 1-row matrix");
    sae.b_enc = b.data;
    sae.validate();
    return sae;
}

void save_sae(const std::string& manifest_path, const SaeWeights& sae) {
    sae.validate();
    const std::filesystem::path mp(manifest_path);
    const auto stem = mp.stem().string();
    const auto dir = mp.parent_path();

    const std::string enc_name = stem + ".w_enc.actv";
    const std::string bias_name = stem + ".b_enc.actv";
    const std::string dec_name = stem + ".w_dec.actv";

    records::write_activation_matrix((dir / enc_name).string(),
                                     records::mat_to_activation(sae.w_enc, 0));
    Mat b(1, sae.b_enc.size());
    b.data = sae.b_enc;
    records::write_activation_matrix((dir / bias_name).string(), records::mat_to_activation(b, 0));
    records::write_activation_matrix((dir / dec_name).string(),
                                     records::mat_to_activation(sae.w_dec, 0));

    json m;
    m["hidden_dim"] = sae.hidden_dim;
    m["feature_count"] = sae.feature_count;
    m["w_enc"] = enc_name;
    m["b_enc"] = bias_name;
    m["w_dec"] = dec_name;
    std::ofstream out(manifest_path);
    if (!out) throw ValidationError("cannot open for writing: " + manifest_path);
    out << m.dump(2) << "\n";
}

std::string recon_stats_to_json(const ReconStats& s) {
    json j;
    j["r2_mean"] = s.r2_mean;
    j["r2_sd"] = s.r2_sd;
    j["fvu"] = s.fvu;
    j["l0_mean"] = s.l0_mean;
    j["l0_sd"] = s.l0_sd;
    j["n"] = s.n;
    j["excluded_rows"] = s.excluded_rows;
    return j.dump(2) + "\n";
}

std::string grid_summary_to_json(const GridSummary& g) {
    json rows = json::array();
    for (const auto& r : g.rows) {
        rows.push_back({{"category", r.category},
                        {"mean", r.mean},
                        {"min", r.min},
                        {"max", r.max},
                        {"n", r.n}});
    }
    json j;
    j["rows"] = rows;
    j["empty_categories"] = g.empty_categories;
    return j.dump(2) + "\n";
}

std::string grid_summary_to_markdown(const GridSummary& g) {
    std::ostringstream os;
    os << "| Prompt type | Mean | Range | n |\n|---|---|---|---|\n";
    os.setf(std::ios::fixed);
    os.precision(1);
    for (const auto& r : g.rows) {
        os << "| " << r.category << " | " << r.mean << " | " << r.min << " to " << r.max
           << " | " << r.n << " |\n";
    }
    return os.str();
}

}  // namespace conlab::sae
