#pragma once

#include <stdexcept>
#include <string>

namespace mtcolor {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class CorruptMask : public Error {
public:
    using Error::Error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

// Raised while reading annotation files / service payloads. `field` is a
// dotted path such as "instances[0].mask.runs".
class SchemaError : public Error {
public:
    SchemaError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

} // namespace mtcolor
