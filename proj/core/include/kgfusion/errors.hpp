#pragma once
// Error taxonomy for the whole pipeline. Every throwing operation names the
// concrete error type so callers (and tests) can match on it.

#include <stdexcept>
#include <string>

namespace kgf {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// kg_store
struct MalformedLine : Error {
    explicit MalformedLine(const std::string& what) : Error(what) {}
};
struct RelationOverflow : Error {
    explicit RelationOverflow(const std::string& what) : Error(what) {}
};
struct InvalidConfig : Error {
    explicit InvalidConfig(const std::string& what) : Error(what) {}
};

// embed_index
struct DimensionMismatch : Error {
    explicit DimensionMismatch(const std::string& what) : Error(what) {}
};
struct ZeroNormInput : Error {
    explicit ZeroNormInput(const std::string& what) : Error(what) {}
};
struct OrphanConcept : Error {
    explicit OrphanConcept(const std::string& what) : Error(what) {}
};

// extract
struct EmptyGraph : Error {
    explicit EmptyGraph(const std::string& what) : Error(what) {}
};

// gnn
struct RelationOutOfRange : Error {
    explicit RelationOutOfRange(const std::string& what) : Error(what) {}
};

// fusion / training
struct UnknownToken : Error {
    explicit UnknownToken(const std::string& what) : Error(what) {}
};
struct EmptyReference : Error {
    explicit EmptyReference(const std::string& what) : Error(what) {}
};
struct DivergedLoss : Error {
    explicit DivergedLoss(const std::string& what) : Error(what) {}
};

// file formats
struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error(what) {}
};

} // namespace kgf
