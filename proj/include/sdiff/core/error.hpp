#pragma once

#include <stdexcept>
#include <string>

namespace sdiff {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration; `field()` names the offending dotted key when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg, std::string field = {})
        : Error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class SingularityError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class TransformError : public Error {
public:
    using Error::Error;
};

class StructureError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class DegenerateLabelError : public Error {
public:
    using Error::Error;
};

class UndefinedSimilarityError : public Error {
public:
    using Error::Error;
};

// A caller broke a usage contract (e.g. nonzero augmentation label while sampling).
class ContractError : public Error {
public:
    using Error::Error;
};

}  // namespace sdiff
