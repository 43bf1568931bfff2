// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every mergeforge module.

#pragma once

#include <stdexcept>
#include <string>

namespace mergeforge {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define MERGEFORGE_ERROR(Name)                      \
    class Name : public Error {                     \
    public:                                         \
        using Error::Error;                         \
    }

MERGEFORGE_ERROR(IncompatibleShapes);
MERGEFORGE_ERROR(LengthMismatch);
MERGEFORGE_ERROR(NonFiniteValue);
MERGEFORGE_ERROR(DimensionMismatch);
MERGEFORGE_ERROR(EmptyBatch);
MERGEFORGE_ERROR(InvalidArgument);
MERGEFORGE_ERROR(InvalidRate);
MERGEFORGE_ERROR(IndexOutOfRange);
MERGEFORGE_ERROR(InsufficientSamples);
MERGEFORGE_ERROR(EmptyList);
MERGEFORGE_ERROR(MissingContext);
MERGEFORGE_ERROR(InvalidRange);
MERGEFORGE_ERROR(DegenerateDeltas);
MERGEFORGE_ERROR(EmptyPool);
MERGEFORGE_ERROR(FormatError);
MERGEFORGE_ERROR(ConfigError);

#undef MERGEFORGE_ERROR

}  // namespace mergeforge
