#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"

namespace mcvi {

// Per-feature mean and standard deviation that were removed from the data.
struct Standardization {
  std::vector<Vector> mean;   // per channel
  std::vector<Vector> scale;  // per channel, strictly positive
};

// Channels observed on a common set of samples. Row s of every channel
// belongs to sample_ids[s].
struct MultiChannelDataset {
  std::vector<std::string> channel_names;
  std::vector<std::vector<std::string>> feature_names;
  std::vector<std::string> sample_ids;
  std::vector<Matrix> channels;
  std::optional<Standardization> standardization;

  std::size_t samples() const noexcept { return sample_ids.size(); }

  void validate() const {
    if (channels.empty()) throw DataError("dataset: no channels");
    if (channel_names.size() != channels.size() || feature_names.size() != channels.size())
      throw DataError("dataset: channel metadata does not match channel count");
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].rows() != sample_ids.size())
        throw DataError("dataset: channel '" + channel_names[c] + "' has " +
                        std::to_string(channels[c].rows()) + " rows for " +
                        std::to_string(sample_ids.size()) + " sample ids");
      if (feature_names[c].size() != channels[c].cols())
        throw DataError("dataset: channel '" + channel_names[c] + "' feature names do not match width");
    }
  }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------
// Contract: UTF-8, comma separated, no quoting, '.' decimal separator. The
// first row holds `id` followed by feature names; every further row holds a
// sample id followed by one number per feature. Numbers are written with 17
// significant digits, which makes write -> read exact.

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view text, double& out) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  if (text.empty()) return false;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  return res.ec == std::errc() && res.ptr == text.data() + text.size() && std::isfinite(out);
}

inline std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    rows.push_back(split_csv_line(trim(line)));
  }
  if (rows.empty()) throw DataError("'" + path.string() + "' is empty");
  return rows;
}

}  // namespace detail

inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

struct ChannelTable {
  std::vector<std::string> feature_names;
  std::vector<std::string> ids;
  Matrix values;
};

inline ChannelTable read_channel_csv(const std::filesystem::path& path) {
  const auto rows = detail::read_csv_rows(path);
  const auto& header = rows.front();
  if (header.size() < 2) throw DataError("'" + path.string() + "': header needs an id column and at least one feature");
  ChannelTable t;
  for (std::size_t k = 1; k < header.size(); ++k) t.feature_names.emplace_back(detail::trim(header[k]));
  const std::size_t width = t.feature_names.size();
  if (rows.size() < 2) throw DataError("'" + path.string() + "' has no data rows");
  std::vector<double> data;
  data.reserve((rows.size() - 1) * width);
  std::set<std::string> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw DataError("'" + path.string() + "' row " + std::to_string(r + 1) + ": expected " +
                      std::to_string(header.size()) + " fields, found " + std::to_string(row.size()));
    }
    std::string id(detail::trim(row[0]));
    if (id.empty()) throw DataError("'" + path.string() + "' row " + std::to_string(r + 1) + ": empty id");
    if (!seen.insert(id).second)
      throw DataError("'" + path.string() + "': duplicate sample id '" + id + "'");
    t.ids.push_back(std::move(id));
    for (std::size_t k = 1; k < row.size(); ++k) {
      double v = 0.0;
      if (!detail::parse_double(row[k], v)) {
        throw DataError("'" + path.string() + "' row " + std::to_string(r + 1) + ", column " +
                        std::to_string(k + 1) + " ('" + t.feature_names[k - 1] +
                        "'): not a finite number: '" + row[k] + "'");
      }
      data.push_back(v);
    }
  }
  t.values = Matrix(t.ids.size(), width, std::move(data));
  return t;
}

inline void write_channel_csv(const std::filesystem::path& path, std::span<const std::string> ids,
                              std::span<const std::string> feature_names, const Matrix& values) {
  if (ids.size() != values.rows() || feature_names.size() != values.cols())
    throw ShapeError("write_channel_csv: ids/features do not match matrix shape");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "id";
  for (const auto& f : feature_names) out << ',' << f;
  out << '\n';
  for (std::size_t s = 0; s < values.rows(); ++s) {
    out << ids[s];
    for (double v : values.row(s)) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw DataError("failed while writing '" + path.string() + "'");
}

// Loads one CSV per channel and aligns rows by sample id (sorted ascending).
inline MultiChannelDataset load_channels(std::span<const std::filesystem::path> paths) {
  if (paths.empty()) throw DataError("load_channels: no files given");
  MultiChannelDataset ds;
  std::vector<ChannelTable> tables;
  for (const auto& p : paths) {
    tables.push_back(read_channel_csv(p));
    ds.channel_names.push_back(p.stem().string());
  }
  std::vector<std::string> ids = tables.front().ids;
  std::sort(ids.begin(), ids.end());
  const std::set<std::string> reference(ids.begin(), ids.end());
  for (std::size_t c = 1; c < tables.size(); ++c) {
    const std::set<std::string> other(tables[c].ids.begin(), tables[c].ids.end());
    std::vector<std::string> missing, extra;
    std::set_difference(reference.begin(), reference.end(), other.begin(), other.end(), std::back_inserter(missing));
    std::set_difference(other.begin(), other.end(), reference.begin(), reference.end(), std::back_inserter(extra));
    if (!missing.empty() || !extra.empty()) {
      std::string msg = "sample ids of '" + paths[c].string() + "' differ from '" + paths[0].string() + "':";
      for (const auto& id : missing) msg += " missing '" + id + "'";
      for (const auto& id : extra) msg += " unexpected '" + id + "'";
      throw DataError(msg);
    }
  }
  {
    std::set<std::string> names;
    for (auto& name : ds.channel_names) {
      if (!names.insert(name).second) throw DataError("duplicate channel name '" + name + "'");
    }
  }
  for (auto& t : tables) {
    std::map<std::string, std::size_t> row_of;
    for (std::size_t r = 0; r < t.ids.size(); ++r) row_of[t.ids[r]] = r;
    Matrix aligned(ids.size(), t.values.cols());
    for (std::size_t s = 0; s < ids.size(); ++s) {
      const auto src = t.values.row(row_of.at(ids[s]));
      std::copy(src.begin(), src.end(), aligned.row(s).begin());
    }
    ds.channels.push_back(std::move(aligned));
    ds.feature_names.push_back(std::move(t.feature_names));
  }
  ds.sample_ids = std::move(ids);
  ds.validate();
  return ds;
}

// Subset of samples, in the order given.
inline MultiChannelDataset select_samples(const MultiChannelDataset& ds, std::span<const std::size_t> rows) {
  MultiChannelDataset out;
  out.channel_names = ds.channel_names;
  out.feature_names = ds.feature_names;
  out.standardization = ds.standardization;
  for (std::size_t r : rows) {
    if (r >= ds.samples()) throw DataError("select_samples: row " + std::to_string(r) + " out of range");
    out.sample_ids.push_back(ds.sample_ids[r]);
  }
  for (const auto& x : ds.channels) {
    Matrix m(rows.size(), x.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto src = x.row(rows[k]);
      std::copy(src.begin(), src.end(), m.row(k).begin());
    }
    out.channels.push_back(std::move(m));
  }
  return out;
}

// Random disjoint (train, held-out) partition; each part keeps row order.
inline std::pair<MultiChannelDataset, MultiChannelDataset> split_samples(const MultiChannelDataset& ds,
                                                                         double holdout_fraction,
                                                                         std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw DataError("split_samples: fraction must lie in (0, 1)");
  const std::size_t n = ds.samples();
  const auto n_out = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
  if (n_out < 1 || n_out >= n) throw DataError("split_samples: fraction leaves an empty part");
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_out));
  std::vector<std::size_t> kept(order.begin() + static_cast<std::ptrdiff_t>(n_out), order.end());
  std::sort(held.begin(), held.end());
  std::sort(kept.begin(), kept.end());
  return {select_samples(ds, kept), select_samples(ds, held)};
}

// Sum of log scales: converts a log density of standardized data back to the
// original units (subtract it).
inline double log_jacobian(const Standardization& rec) {
  double acc = 0.0;
  for (const auto& scale : rec.scale)
    for (double s : scale) acc += std::log(s);
  return acc;
}

// Centers every feature and divides by its population standard deviation.
inline MultiChannelDataset standardize(const MultiChannelDataset& ds) {
  ds.validate();
  MultiChannelDataset out = ds;
  Standardization rec;
  const double n = static_cast<double>(ds.samples());
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    const Matrix& x = ds.channels[c];
    Vector mean(x.cols(), 0.0), scale(x.cols(), 0.0);
    for (std::size_t s = 0; s < x.rows(); ++s)
      for (std::size_t j = 0; j < x.cols(); ++j) mean[j] += x(s, j);
    for (double& m : mean) m /= n;
    for (std::size_t s = 0; s < x.rows(); ++s)
      for (std::size_t j = 0; j < x.cols(); ++j) scale[j] += (x(s, j) - mean[j]) * (x(s, j) - mean[j]);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      scale[j] = std::sqrt(scale[j] / n);
      if (!(scale[j] > 0.0)) {
        throw DataError("standardize: feature '" + ds.feature_names[c][j] + "' of channel '" +
                        ds.channel_names[c] + "' has zero variance");
      }
    }
    Matrix& y = out.channels[c];
    for (std::size_t s = 0; s < y.rows(); ++s)
      for (std::size_t j = 0; j < y.cols(); ++j) y(s, j) = (x(s, j) - mean[j]) / scale[j];
    rec.mean.push_back(std::move(mean));
    rec.scale.push_back(std::move(scale));
  }
  out.standardization = std::move(rec);
  return out;
}

// Applies a previously computed record to data in original units.
inline MultiChannelDataset apply_standardization(const MultiChannelDataset& ds, const Standardization& rec) {
  ds.validate();
  if (rec.mean.size() != ds.channels.size()) throw DataError("standardization record has wrong channel count");
  MultiChannelDataset out = ds;
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    Matrix& y = out.channels[c];
    if (rec.mean[c].size() != y.cols() || rec.scale[c].size() != y.cols())
      throw DataError("standardization record does not match channel '" + ds.channel_names[c] + "'");
    for (std::size_t s = 0; s < y.rows(); ++s)
      for (std::size_t j = 0; j < y.cols(); ++j) y(s, j) = (y(s, j) - rec.mean[c][j]) / rec.scale[c][j];
  }
  out.standardization = rec;
  return out;
}

inline MultiChannelDataset inverse_standardize(const MultiChannelDataset& ds) {
  if (!ds.standardization) throw DataError("inverse_standardize: dataset carries no standardization record");
  const auto& rec = *ds.standardization;
  MultiChannelDataset out = ds;
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    Matrix& y = out.channels[c];
    for (std::size_t s = 0; s < y.rows(); ++s)
      for (std::size_t j = 0; j < y.cols(); ++j) y(s, j) = y(s, j) * rec.scale[c][j] + rec.mean[c][j];
  }
  out.standardization.reset();
  return out;
}

// Two-column CSV (id, class). Class names are mapped to 0..K-1 in sorted order;
// the result is aligned with `sample_ids`.
inline std::vector<int> load_labels(const std::filesystem::path& path, std::span<const std::string> sample_ids,
                                    std::vector<std::string>* class_names = nullptr) {
  const auto rows = detail::read_csv_rows(path);
  std::map<std::string, std::string> label_of;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 2)
      throw DataError("'" + path.string() + "' row " + std::to_string(r + 1) + ": expected id,class");
    label_of[std::string(detail::trim(rows[r][0]))] = std::string(detail::trim(rows[r][1]));
  }
  std::set<std::string> names;
  for (const auto& [id, cls] : label_of) names.insert(cls);
  std::map<std::string, int> code;
  for (const auto& n : names) code.emplace(n, static_cast<int>(code.size()));
  std::vector<int> out;
  for (const auto& id : sample_ids) {
    const auto it = label_of.find(id);
    if (it == label_of.end()) throw DataError("'" + path.string() + "' has no label for sample '" + id + "'");
    out.push_back(code.at(it->second));
  }
  if (class_names) class_names->assign(names.begin(), names.end());
  return out;
}

}  // namespace mcvi
