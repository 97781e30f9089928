#pragma once

#include <vector>

#include <Eigen/Core>

#include "ssdt/error.hpp"

namespace ssdt {

/// Row-major flattening used by the checkpoint payload.
inline std::vector<double> to_vec(const Eigen::MatrixXd& m) {
    std::vector<double> v(std::size_t(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            v[std::size_t(r) * std::size_t(m.cols()) + std::size_t(c)] = m(r, c);
    return v;
}

inline std::vector<double> to_vec(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::MatrixXd matrix_from_vec(const std::vector<double>& v, Eigen::Index rows,
                                       Eigen::Index cols) {
    if (v.size() != std::size_t(rows) * std::size_t(cols))
        throw ShapeError("checkpoint tensor size does not match expected shape");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = v[std::size_t(r) * std::size_t(cols) + std::size_t(c)];
    return m;
}

inline Eigen::VectorXd vector_from_vec(const std::vector<double>& v, Eigen::Index size) {
    if (v.size() != std::size_t(size))
        throw ShapeError("checkpoint tensor size does not match expected shape");
    return Eigen::Map<const Eigen::VectorXd>(v.data(), size);
}

} // namespace ssdt
