#pragma once

#include <stdexcept>
#include <string>

namespace frrr {

/// Argument outside the admissible domain of a family, prior or sampler.
class invalid_parameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Matrix shapes do not conform.
class shape_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A family bound (C_U, C_L or U_1) is infinite or zero where a finite
/// positive value is required.
class unbounded_bound : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Response or design data failed validation.
class data_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Sampler divergence, solver non-convergence and similar.
class numerical_failure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Requested configuration is outside what an operation supports.
class unsupported : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent run configuration.
class config_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace frrr
