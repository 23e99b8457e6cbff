// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace segguide {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

/// A target mask contains a class that no registered guide can predict.
class OrphanClassError : public Error {
public:
    OrphanClassError(int class_id, const std::string& name)
        : Error("no registered guide supports class " + std::to_string(class_id) +
                (name.empty() ? std::string{} : " (" + name + ")")),
          class_id_(class_id) {}

    int class_id() const noexcept { return class_id_; }

private:
    int class_id_;
};

/// A non-finite loss or gradient showed up during optimization.
class NumericError : public Error {
public:
    NumericError(const std::string& what, int step) : Error(what), step_(step) {}

    int step() const noexcept { return step_; }

private:
    int step_;
};

struct FieldError {
    std::string field;
    std::string message;
};

/// Carries every violated field, not only the first.
class ValidationError : public Error {
public:
    explicit ValidationError(std::vector<FieldError> fields)
        : Error(summarize(fields)), fields_(std::move(fields)) {}
    ValidationError(std::string field, std::string message)
        : ValidationError(std::vector<FieldError>{{std::move(field), std::move(message)}}) {}

    const std::vector<FieldError>& fields() const noexcept { return fields_; }

private:
    static std::string summarize(const std::vector<FieldError>& fields) {
        std::string out = "validation failed:";
        for (const auto& f : fields) {
            out += " [" + f.field + ": " + f.message + "]";
        }
        return out;
    }

    std::vector<FieldError> fields_;
};

}  // namespace segguide
