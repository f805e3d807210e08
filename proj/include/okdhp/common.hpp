#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace okdhp {

using dim_t = std::int64_t;

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto stable exit codes (2 usage/config,
// 3 I/O/format, 4 numerical abort).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/layer shape disagreement; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid configuration or flag combination, detected at build time.
struct ConfigError : Error {
    using Error::Error;
};

/// Corrupt or truncated on-disk artifact.
struct FormatError : Error {
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : Error(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    explicit FormatError(const std::string& msg) : Error(msg), offset(0) {}
    std::uint64_t offset;
};

/// API contract violation (non-scalar backward root, missing gradient, ...).
struct ContractError : Error {
    using Error::Error;
};

/// Non-finite value where the training contract requires finiteness.
struct NumericError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shape: up to rank 4, row-major semantics.
// ---------------------------------------------------------------------------

class Shape {
  public:
    Shape() = default;

    Shape(std::initializer_list<dim_t> dims) {
        if (dims.size() > 4) throw ShapeError("rank > 4 not supported");
        for (dim_t d : dims) d_[static_cast<std::size_t>(rank_++)] = d;
        validate();
    }

    explicit Shape(const std::vector<dim_t>& dims) {
        if (dims.size() > 4) throw ShapeError("rank > 4 not supported");
        for (dim_t d : dims) d_[static_cast<std::size_t>(rank_++)] = d;
        validate();
    }

    int rank() const { return rank_; }

    dim_t operator[](int i) const { return d_[static_cast<std::size_t>(i)]; }

    dim_t numel() const {
        dim_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= d_[static_cast<std::size_t>(i)];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (d_[static_cast<std::size_t>(i)] != o.d_[static_cast<std::size_t>(i)]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "(";
        for (int i = 0; i < rank_; ++i) {
            if (i) s += ",";
            s += std::to_string(d_[static_cast<std::size_t>(i)]);
        }
        return s + ")";
    }

    std::vector<dim_t> dims() const {
        return std::vector<dim_t>(d_.begin(), d_.begin() + rank_);
    }

  private:
    void validate() const {
        for (int i = 0; i < rank_; ++i)
            if (d_[static_cast<std::size_t>(i)] <= 0)
                throw ShapeError("non-positive extent in shape " + str());
    }

    std::array<dim_t, 4> d_{1, 1, 1, 1};
    int rank_ = 0;
};

inline std::string format_two_shapes(const char* what, const Shape& a, const Shape& b) {
    return std::string(what) + ": " + a.str() + " vs " + b.str();
}

} // namespace okdhp
