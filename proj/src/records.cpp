#include "conlab/records.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include <json.hpp>

using nlohmann::json;

namespace conlab::records {

std::string ground_truth_to_string(GroundTruth gt) {
    switch (gt) {
        case GroundTruth::Yes: return "Yes";
        case GroundTruth::No: return "No";
        case GroundTruth::None: return "None";
    }
    return "None";
}

GroundTruth ground_truth_from_string(const std::string& s) {
    if (s == "Yes" || s == "yes") return GroundTruth::Yes;
    if (s == "No" || s == "no") return GroundTruth::No;
    if (s == "None" || s == "none" || s.empty()) return GroundTruth::None;
    throw ValidationError("unknown ground_truth value: '" + s + "'");
}

namespace {

const char* const kRequiredStrings[] = {"pair_id", "question_id", "image_id",
                                        "question_text", "paraphrase_text"};
const char* const kRequiredLogits[] = {"logit_yes_orig", "logit_no_orig",
                                       "logit_yes_para", "logit_no_para"};
const char* const kOptionalFields[] = {"response_orig", "response_para",
                                       "ground_truth", "similarity"};

[[noreturn]] void fail_line(std::size_t lineno, const std::string& what) {
    throw ValidationError("line " + std::to_string(lineno) + ": " + what);
}

double require_finite_number(const json& obj, const char* field, std::size_t lineno) {
    const auto it = obj.find(field);
    if (it == obj.end()) fail_line(lineno, std::string("missing required field '") + field + "'");
    if (!it->is_number()) fail_line(lineno, std::string("field '") + field + "' is not a number");
    const double v = it->get<double>();
    if (!std::isfinite(v)) fail_line(lineno, std::string("field '") + field + "' is not finite");
    return v;
}

}  // namespace

std::vector<EvalRecord> load_records(const std::string& path, LoadStats* stats) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open records file: " + path);

    std::vector<EvalRecord> out;
    std::string line;
    std::size_t lineno = 0;
    std::size_t unknown_warn = 0;
    std::unordered_set<std::string> seen_ids;

    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;

        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            fail_line(lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!obj.is_object()) fail_line(lineno, "line is not a JSON object");

        EvalRecord rec;
        for (const char* f : kRequiredStrings) {
            const auto it = obj.find(f);
            if (it == obj.end()) fail_line(lineno, std::string("missing required field '") + f + "'");
            if (!it->is_string()) fail_line(lineno, std::string("field '") + f + "' is not a string");
        }
        rec.pair_id = obj["pair_id"].get<std::string>();
        rec.question_id = obj["question_id"].get<std::string>();
        rec.image_id = obj["image_id"].get<std::string>();
        rec.question_text = obj["question_text"].get<std::string>();
        rec.paraphrase_text = obj["paraphrase_text"].get<std::string>();

        rec.logit_yes_orig = require_finite_number(obj, "logit_yes_orig", lineno);
        rec.logit_no_orig = require_finite_number(obj, "logit_no_orig", lineno);
        rec.logit_yes_para = require_finite_number(obj, "logit_yes_para", lineno);
        rec.logit_no_para = require_finite_number(obj, "logit_no_para", lineno);

        try {
            if (obj.contains("response_orig")) rec.response_orig = obj["response_orig"].get<std::string>();
            if (obj.contains("response_para")) rec.response_para = obj["response_para"].get<std::string>();
            if (obj.contains("ground_truth")) {
                rec.ground_truth = ground_truth_from_string(obj["ground_truth"].get<std::string>());
            }
        } catch (const json::exception& e) {
            fail_line(lineno, std::string("bad optional field: ") + e.what());
        } catch (const ValidationError& e) {
            fail_line(lineno, e.what());
        }
        if (obj.contains("similarity")) {
            if (!obj["similarity"].is_number()) fail_line(lineno, "field 'similarity' is not a number");
            const double s = obj["similarity"].get<double>();
            if (!(s >= 0.0 && s <= 1.0)) fail_line(lineno, "similarity outside [0,1]");
            rec.similarity = s;
        }

        for (auto it = obj.begin(); it != obj.end(); ++it) {
            bool known = false;
            for (const char* f : kRequiredStrings) known |= (it.key() == f);
            for (const char* f : kRequiredLogits) known |= (it.key() == f);
            for (const char* f : kOptionalFields) known |= (it.key() == f);
            if (!known) {
                ++unknown_warn;
                std::cerr << "warning: line " << lineno << ": ignoring unknown field '"
                          << it.key() << "'\n";
            }
        }

        if (!seen_ids.insert(rec.pair_id).second) {
            fail_line(lineno, "duplicate pair_id '" + rec.pair_id + "'");
        }
        out.push_back(std::move(rec));
    }

    if (stats) stats->unknown_field_warnings = unknown_warn;
    return out;
}

void save_records(const std::string& path, const std::vector<EvalRecord>& recs) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    for (const auto& r : recs) {
        json obj;
        obj["pair_id"] = r.pair_id;
        obj["question_id"] = r.question_id;
        obj["image_id"] = r.image_id;
        obj["question_text"] = r.question_text;
        obj["paraphrase_text"] = r.paraphrase_text;
        obj["logit_yes_orig"] = r.logit_yes_orig;
        obj["logit_no_orig"] = r.logit_no_orig;
        obj["logit_yes_para"] = r.logit_yes_para;
        obj["logit_no_para"] = r.logit_no_para;
        if (r.response_orig) obj["response_orig"] = *r.response_orig;
        if (r.response_para) obj["response_para"] = *r.response_para;
        if (r.ground_truth != GroundTruth::None) obj["ground_truth"] = ground_truth_to_string(r.ground_truth);
        if (r.similarity) obj["similarity"] = *r.similarity;
        out << obj.dump() << "\n";
    }
}

const std::vector<std::string>& default_hedging_terms() {
    static const std::vector<std::string> terms = {"possibly", "might", "cannot determine",
                                                   "unclear", "maybe"};
    return terms;
}

namespace {

std::string to_lower(const std::string& s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

// Whole-word (or whole-phrase) match anywhere in the lowered text.
bool contains_term(const std::string& lowered, const std::string& term) {
    std::size_t pos = 0;
    while ((pos = lowered.find(term, pos)) != std::string::npos) {
        const bool left_ok = (pos == 0) || !is_word_char(lowered[pos - 1]);
        const std::size_t end = pos + term.size();
        const bool right_ok = (end == lowered.size()) || !is_word_char(lowered[end]);
        if (left_ok && right_ok) return true;
        ++pos;
    }
    return false;
}

}  // namespace

ParseResult parse_yes_no(const std::string& text, const std::vector<std::string>& hedging_terms) {
    const std::string lowered = to_lower(text);

    // Hedging overrides an otherwise decisive leading token.
    for (const auto& term : hedging_terms) {
        if (contains_term(lowered, to_lower(term))) {
            return {Label::Ambiguous, "hedging:" + term};
        }
    }

    std::size_t i = 0;
    while (i < lowered.size() && !is_word_char(lowered[i])) ++i;
    std::string token;
    while (i < lowered.size() && is_word_char(lowered[i])) token.push_back(lowered[i++]);

    if (token == "yes") return {Label::Yes, "leading:yes"};
    if (token == "no") return {Label::No, "leading:no"};
    return {Label::Ambiguous, "no-rule"};
}

// ---------------------------------------------------------------------------
// ACTV container
//   magic "ACTV" | u8 version=1 | u32le header length | JSON header | f32le payload
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'C', 'T', 'V'};
constexpr std::uint8_t kVersion = 1;

void put_u32le(std::ofstream& out, std::uint32_t v) {
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32le(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float f32_from_le(const unsigned char* b) {
    const std::uint32_t bits = get_u32le(b);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

void f32_to_le(float f, unsigned char* b) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    b[0] = static_cast<unsigned char>(bits & 0xff);
    b[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    b[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    b[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

}  // namespace

ActivationMatrix read_activation_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open activation file: " + path);

    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw ValidationError(path + ": bad magic (expected ACTV)");
    }
    char version = 0;
    if (!in.read(&version, 1) || static_cast<std::uint8_t>(version) != kVersion) {
        throw ValidationError(path + ": unsupported ACTV version");
    }
    unsigned char lenb[4];
    if (!in.read(reinterpret_cast<char*>(lenb), 4)) {
        throw ValidationError(path + ": truncated header length");
    }
    const std::uint32_t hlen = get_u32le(lenb);
    std::string header(hlen, '\0');
    if (!in.read(header.data(), hlen)) throw ValidationError(path + ": truncated header");

    json h;
    try {
        h = json::parse(header);
    } catch (const json::parse_error& e) {
        throw ValidationError(path + ": bad header JSON: " + e.what());
    }
    for (const char* f : {"rows", "cols", "layer", "dtype", "order", "endian"}) {
        if (!h.contains(f)) throw ValidationError(path + ": header missing '" + std::string(f) + "'");
    }
    if (h["dtype"] != "f32" || h["order"] != "row-major" || h["endian"] != "little") {
        throw ValidationError(path + ": unsupported dtype/order/endian");
    }

    ActivationMatrix m;
    m.rows = h["rows"].get<std::size_t>();
    m.cols = h["cols"].get<std::size_t>();
    m.layer = h["layer"].get<int>();
    if (m.layer < 0) throw ValidationError(path + ": negative layer");
    if (m.rows != 0 && m.cols > (std::size_t{1} << 40) / m.rows) {
        throw ValidationError(path + ": implausible dimensions in header");
    }

    const std::size_t n = m.rows * m.cols;
    std::vector<unsigned char> payload(n * 4);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    const std::size_t got = static_cast<std::size_t>(in.gcount());
    if (got != payload.size()) {
        throw ValidationError(path + ": expected " + std::to_string(payload.size()) +
                              " bytes, got " + std::to_string(got));
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw ValidationError(path + ": trailing bytes after payload");
    }

    m.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float v = f32_from_le(payload.data() + i * 4);
        if (!std::isfinite(v)) {
            throw ValidationError(path + ": non-finite value at index " + std::to_string(i));
        }
        m.values[i] = v;
    }
    return m;
}

void write_activation_matrix(const std::string& path, const ActivationMatrix& m) {
    if (m.values.size() != m.rows * m.cols) {
        throw ValidationError("activation matrix has " + std::to_string(m.values.size()) +
                              " values, expected " + std::to_string(m.rows * m.cols));
    }
    if (m.layer < 0) throw ValidationError("activation matrix layer must be >= 0");
    for (float v : m.values) {
        if (!std::isfinite(v)) throw ValidationError("refusing to write non-finite activation value");
    }

    json h;
    h["rows"] = m.rows;
    h["cols"] = m.cols;
    h["layer"] = m.layer;
    h["dtype"] = "f32";
    h["order"] = "row-major";
    h["endian"] = "little";
    const std::string header = h.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out.write(kMagic, 4);
    const char version = static_cast<char>(kVersion);
    out.write(&version, 1);
    put_u32le(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));

    std::vector<unsigned char> payload(m.values.size() * 4);
    for (std::size_t i = 0; i < m.values.size(); ++i) f32_to_le(m.values[i], payload.data() + i * 4);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw ValidationError("write failed: " + path);
}

ActivationMatrix to_activation_matrix(const std::vector<Vec>& rows, int layer) {
    ActivationMatrix m;
    m.layer = layer;
    m.rows = rows.size();
    m.cols = rows.empty() ? 0 : rows.front().size();
    m.values.reserve(m.rows * m.cols);
    for (const auto& r : rows) {
        if (r.size() != m.cols) throw ValidationError("ragged activation rows");
        for (double v : r) m.values.push_back(static_cast<float>(v));
    }
    return m;
}

ActivationMatrix mat_to_activation(const Mat& m, int layer) {
    ActivationMatrix a;
    a.rows = m.rows;
    a.cols = m.cols;
    a.layer = layer;
    a.values.resize(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) a.values[i] = static_cast<float>(m.data[i]);
    return a;
}

Mat activation_to_mat(const ActivationMatrix& m) {
    Mat out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.values.size(); ++i) out.data[i] = static_cast<double>(m.values[i]);
    return out;
}

}  // namespace conlab::records
