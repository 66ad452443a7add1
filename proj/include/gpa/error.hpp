/* Copyright 2026 The GPA Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <stdexcept>
#include <string>

namespace gpa {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A scalar hyper-parameter outside its admissible range (sigma <= 0, gamma < 0, ...).
class invalid_parameter : public error {
 public:
  using error::error;
};

// Malformed data: dimension mismatch, zero-area proposal, bad label.
class invalid_input : public error {
 public:
  using error::error;
};

class degenerate_graph : public error {
 public:
  using error::error;
};

class invalid_spec : public error {
 public:
  using error::error;
};

// Configuration problem; key() names the offending entry.
class config_error : public error {
 public:
  config_error(std::string key, const std::string& what)
      : error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace gpa
