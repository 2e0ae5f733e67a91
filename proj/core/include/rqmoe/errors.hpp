#pragma once

#include <stdexcept>
#include <string>

namespace rqmoe {

// Base for all library errors. kind() is a stable machine-readable tag used
// by the CLI for single-line error reporting.
class error : public std::runtime_error {
  public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
    virtual const char* kind() const noexcept { return "error"; }
};

class shape_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "shape"; }
};

class config_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "config"; }
};

class range_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "range"; }
};

class invalid_code_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "invalid-code"; }
};

class insufficient_data_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "insufficient-data"; }
};

// Non-finite values encountered during training/evaluation.
class numeric_error : public error {
  public:
    explicit numeric_error(const std::string& msg, std::size_t step = 0)
        : error(msg), step_(step) {}
    const char* kind() const noexcept override { return "numeric"; }
    std::size_t step() const noexcept { return step_; }

  private:
    std::size_t step_ = 0;
};

class io_error : public error {
  public:
    using error::error;
    const char* kind() const noexcept override { return "io"; }
};

class corrupt_file_error : public io_error {
  public:
    using io_error::io_error;
    const char* kind() const noexcept override { return "corrupt-file"; }
};

class truncation_error : public io_error {
  public:
    using io_error::io_error;
    const char* kind() const noexcept override { return "truncated-file"; }
};

class encoding_error : public io_error {
  public:
    using io_error::io_error;
    const char* kind() const noexcept override { return "encoding"; }
};

}  // namespace rqmoe
