#pragma once

#include <stdexcept>
#include <string>

namespace powerpm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, long row) : Error(what), row_(row) {}
  /// Zero-based data row (header excluded) where ingestion failed, or -1.
  long row() const { return row_; }

 private:
  long row_;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::string key_path = {})
      : Error(what), key_path_(std::move(key_path)) {}
  const std::string& key_path() const { return key_path_; }

 private:
  std::string key_path_;
};

class EncodingError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class MaskError : public Error {
 public:
  using Error::Error;
};

class TaskError : public Error {
 public:
  using Error::Error;
};

}  // namespace powerpm
