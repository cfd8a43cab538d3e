#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace forge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using nlohmann::json;

// Repo-wide JSON matrix format: row-major nested arrays. Vectors are flat arrays.

inline json to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

inline Matrix matrix_from_json(const json& j, const std::string& what = "matrix") {
    if (!j.is_array() || j.empty() || !j.front().is_array())
        throw std::invalid_argument(what + ": expected a nested array (row-major matrix)");
    const std::size_t rows = j.size();
    const std::size_t cols = j.front().size();
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (j[i].size() != cols)
            throw std::invalid_argument(what + ": ragged rows at row " + std::to_string(i));
        for (std::size_t k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
    }
    return m;
}

inline Vector vector_from_json(const json& j, const std::string& what = "vector") {
    if (!j.is_array()) throw std::invalid_argument(what + ": expected a flat array");
    Vector v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
    return v;
}

} // namespace forge
