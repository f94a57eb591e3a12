#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace hdwsr {

// Accumulates multiply-accumulate work per named site. One fused
// multiply-add counts as 2 flops. Keys are slash-joined paths; an RAII
// FlopScope pushes path segments so call sites only name their local step.
// add() and merge() are thread safe; the scope stack is not shared across
// threads (use one ledger per worker and merge).
class FlopLedger {
 public:
  void add(const std::string& key, std::uint64_t flops);
  void merge(const FlopLedger& other);
  std::uint64_t total() const;
  std::uint64_t at(const std::string& key) const;  // 0 when absent
  bool empty() const;
  void clear();
  std::map<std::string, std::uint64_t> entries() const;

  void push_scope(const std::string& name);
  void pop_scope();

 private:
  std::string scoped_key(const std::string& key) const;

  mutable std::mutex mu_;
  std::map<std::string, std::uint64_t> counts_;
  std::vector<std::string> scope_;
};

class FlopScope {
 public:
  FlopScope(FlopLedger* ledger, const std::string& name) : ledger_(ledger) {
    if (ledger_) ledger_->push_scope(name);
  }
  ~FlopScope() {
    if (ledger_) ledger_->pop_scope();
  }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopLedger* ledger_;
};

// Structured summary: per-site counts plus the grand total. Throws
// ReportError when nothing was recorded.
nlohmann::json flop_report_json(const FlopLedger& ledger);

// name=value lines, one per site, "total" last.
std::string flop_report_text(const FlopLedger& ledger);

}  // namespace hdwsr
