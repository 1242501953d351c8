#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eend/numerics/tensor.hpp"

namespace eend::num {

// Counts multiply-accumulates and records every tensor shape produced while
// the scope is alive. Scopes nest; only the innermost one records.
class OpAudit {
 public:
  struct Record {
    std::string op;
    Shape shape;
    std::uint64_t macs = 0;
  };

  OpAudit();
  ~OpAudit();
  OpAudit(const OpAudit&) = delete;
  OpAudit& operator=(const OpAudit&) = delete;

  std::uint64_t macs() const { return macs_; }
  const std::vector<Record>& records() const { return records_; }
  // Largest element count of any produced tensor.
  std::size_t max_numel() const;
  // True when some tensor has at least two axes of exactly `n` elements.
  bool has_square_axes(std::size_t n) const;

  void record(const std::string& op, const Shape& shape, std::uint64_t macs);

 private:
  OpAudit* previous_;
  std::uint64_t macs_ = 0;
  std::vector<Record> records_;
};

void audit_record(const std::string& op, const Shape& shape, std::uint64_t macs);

}  // namespace eend::num
