#include "stalab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace stalab {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'L', 'B'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "weight container assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

} // namespace

void save_weights(const std::string& path, const NamedMatrices& weights) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_weights: cannot open " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    for (const auto& [name, m] : weights) {
        put_u32(os, std::uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        put_u32(os, std::uint32_t(m.rows()));
        put_u32(os, std::uint32_t(m.cols()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                double v = m(i, j);
                os.write(reinterpret_cast<const char*>(&v), 8);
            }
    }
    if (!os) throw std::runtime_error("save_weights: write failed for " + path);
}

NamedMatrices load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_weights: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_weights: bad magic in " + path);
    if (get_u32(is) != kVersion)
        throw std::runtime_error("load_weights: unsupported version in " + path);
    NamedMatrices out;
    while (true) {
        std::uint32_t name_len = get_u32(is);
        if (is.eof()) break;
        if (!is) throw std::runtime_error("load_weights: truncated file " + path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        std::uint32_t rows = get_u32(is);
        std::uint32_t cols = get_u32(is);
        Matrix m(rows, cols);
        for (std::uint32_t i = 0; i < rows; ++i)
            for (std::uint32_t j = 0; j < cols; ++j) {
                double v;
                is.read(reinterpret_cast<char*>(&v), 8);
                m(i, j) = v;
            }
        if (!is) throw std::runtime_error("load_weights: truncated record in " + path);
        out.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

json to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

json to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

json to_json(const GaussianSpec& spec) {
    return json{{"mean", to_json(spec.mean)}, {"cov", to_json(spec.cov)}};
}

json to_json(const BoundCheck& check) {
    return json{{"name", check.name},
                {"lhs", check.lhs},
                {"rhs", check.rhs},
                {"satisfied", check.satisfied}};
}

json to_json(const ShiftReport& report) {
    json checks = json::array();
    for (const auto& c : report.bound_checks) checks.push_back(to_json(c));
    return json{{"predicted_mean", to_json(report.predicted.mean)},
                {"predicted_cov", to_json(report.predicted.cov)},
                {"empirical_mean", to_json(report.empirical.mean)},
                {"empirical_cov", to_json(report.empirical.cov)},
                {"mean_abs_err", report.mean_abs_err},
                {"cov_frob_rel_err", report.cov_frob_rel_err},
                {"bound_checks", std::move(checks)},
                {"trials", report.trials},
                {"seed", report.seed},
                {"module", report.module},
                {"assumption_violating", report.assumption_violating}};
}

std::uint64_t config_hash(const json& config) {
    return fnv1a64(config.dump());
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_json_file: cannot open " + path);
    os << j.dump(2) << "\n";
}

} // namespace stalab
