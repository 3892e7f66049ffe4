#pragma once

#include <string>
#include <utility>

#include "sgdph/errors.hpp"
#include "sgdph/tensor.hpp"

namespace sgdph {

// ChannelWise1D parameters carry one scalar per channel (BN gamma/beta, WN
// length, conv bias) and receive the second-order update; everything else is
// Dense.
enum class ParamKind { kChannelWise1D, kDense };

inline const char* to_string(ParamKind kind) {
  return kind == ParamKind::kChannelWise1D ? "channelwise_1d" : "dense";
}

template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> value, ParamKind kind)
      : name_(std::move(name)), value_(std::move(value)), kind_(kind) {
    if (kind_ == ParamKind::kChannelWise1D && value_.rank() != 1) {
      throw ParameterKindError("channel-wise parameter '" + name_ + "' must be 1-D, got " +
                               sgdph::to_string(value_.shape()));
    }
  }

  const std::string& name() const noexcept { return name_; }
  ParamKind kind() const noexcept { return kind_; }
  bool is_channelwise() const noexcept { return kind_ == ParamKind::kChannelWise1D; }

  const Tensor<T>& value() const noexcept { return value_; }
  Tensor<T>& value() noexcept { return value_; }

 private:
  std::string name_;
  Tensor<T> value_;
  ParamKind kind_;
};

}  // namespace sgdph
