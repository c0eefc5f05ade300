#pragma once

#include <stdexcept>
#include <string>

namespace aogqa {

/// Root of every error the engine raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed feature-volume, manifest, annotation or JSON document.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A pattern references a (layer, channel) pair that the volume does not carry.
class MissingSliceError : public Error {
 public:
  using Error::Error;
};

/// Parsing or evaluation was requested on an AOG without templates.
class EmptyModelError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

/// Session state machine violation (double answer, stale question).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Every image of the dataset has already been asked.
class ExhaustedError : public Error {
 public:
  using Error::Error;
};

}  // namespace aogqa
