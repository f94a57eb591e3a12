#include "hdwsr/flops.hpp"

#include <sstream>

#include "hdwsr/errors.hpp"

namespace hdwsr {

void FlopLedger::add(const std::string& key, std::uint64_t flops) {
  if (flops == 0) return;
  const std::string full = scoped_key(key);
  std::lock_guard<std::mutex> lock(mu_);
  counts_[full] += flops;
}

void FlopLedger::merge(const FlopLedger& other) {
  std::map<std::string, std::uint64_t> theirs = other.entries();
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& [k, v] : theirs) counts_[k] += v;
}

std::uint64_t FlopLedger::total() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::uint64_t t = 0;
  for (const auto& [k, v] : counts_) t += v;
  return t;
}

std::uint64_t FlopLedger::at(const std::string& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = counts_.find(key);
  return it == counts_.end() ? 0 : it->second;
}

bool FlopLedger::empty() const {
  std::lock_guard<std::mutex> lock(mu_);
  return counts_.empty();
}

void FlopLedger::clear() {
  std::lock_guard<std::mutex> lock(mu_);
  counts_.clear();
}

std::map<std::string, std::uint64_t> FlopLedger::entries() const {
  std::lock_guard<std::mutex> lock(mu_);
  return counts_;
}

void FlopLedger::push_scope(const std::string& name) { scope_.push_back(name); }

void FlopLedger::pop_scope() {
  if (!scope_.empty()) scope_.pop_back();
}

std::string FlopLedger::scoped_key(const std::string& key) const {
  std::string full;
  for (const auto& s : scope_) {
    full += s;
    full += '/';
  }
  full += key;
  return full;
}

nlohmann::json flop_report_json(const FlopLedger& ledger) {
  if (ledger.empty())
    throw ReportError("flop report requested but no operations were recorded");
  nlohmann::json sites = nlohmann::json::object();
  std::uint64_t total = 0;
  for (const auto& [k, v] : ledger.entries()) {
    sites[k] = v;
    total += v;
  }
  return nlohmann::json{{"sites", sites}, {"total", total}};
}

std::string flop_report_text(const FlopLedger& ledger) {
  if (ledger.empty())
    throw ReportError("flop report requested but no operations were recorded");
  std::ostringstream os;
  std::uint64_t total = 0;
  for (const auto& [k, v] : ledger.entries()) {
    os << k << "=" << v << "\n";
    total += v;
  }
  os << "total=" << total << "\n";
  return os.str();
}

}  // namespace hdwsr
