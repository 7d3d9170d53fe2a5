#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

#include <stdexcept>
#include <string>

namespace coiecd {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
public:
  using Error::Error;
};

class InvalidLogits : public Error {
public:
  using Error::Error;
};

class NotNormalized : public Error {
public:
  using Error::Error;
};

class IndexError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

/// Toy-model or dataset file failed schema validation.
class LoadError : public Error {
public:
  using Error::Error;
};

class IngestError : public Error {
public:
  using Error::Error;
};

class SamplingError : public Error {
public:
  using Error::Error;
};

/// Adapter failure during decoding; carries the step index at which it occurred.
class ModelError : public Error {
public:
  ModelError(const std::string& what, int step = -1) : Error(what), step_(step) {}
  int step() const { return step_; }

private:
  int step_;
};

class TransportError : public Error {
public:
  using Error::Error;
};

class ProtocolError : public Error {
public:
  using Error::Error;
};

/// Non-2xx HTTP response; message includes the response body.
class ServerError : public Error {
public:
  using Error::Error;
};

}  // namespace coiecd
