#include <algorithm>
#include <deque>
#include <set>

#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"

namespace usbb::fat {

using blockdev::kSectorSize;

std::string Finding::format() const {
  std::string out = severity == Severity::kError ? "error" : "warning";
  out += " " + code + " " + (path.empty() ? "-" : path);
  if (!detail.empty()) out += " " + detail;
  return out;
}

bool CheckReport::clean() const { return errors() == 0; }

std::size_t CheckReport::errors() const {
  return static_cast<std::size_t>(std::count_if(findings.begin(), findings.end(), [](const Finding& f) {
    return f.severity == Finding::Severity::kError;
  }));
}

namespace {

constexpr std::size_t kLfnOffsets[13] = {1, 3, 5, 7, 9, 14, 16, 18, 20, 22, 24, 28, 30};

class Checker {
 public:
  explicit Checker(blockdev::BlockDevice& dev) : dev_(dev) {}

  CheckReport run() {
    Bytes boot(kSectorSize);
    try {
      dev_.read(0, 1, boot);
      bpb_ = parse_boot_sector(boot);
      g_ = derive_geometry(bpb_);
    } catch (const Error& e) {
      error("boot", "", e.what());
      return std::move(report_);
    }
    report_.cluster_count = g_.cluster_count;
    max_ = g_.cluster_count + 1;
    load_fats();
    owner_.assign(static_cast<std::size_t>(max_) + 1, -1);
    walk();
    account();
    check_fsinfo(boot);
    return std::move(report_);
  }

 private:
  void error(std::string code, std::string path, std::string detail) {
    report_.findings.push_back({Finding::Severity::kError, std::move(code), std::move(path), std::move(detail)});
  }
  void warning(std::string code, std::string path, std::string detail) {
    report_.findings.push_back({Finding::Severity::kWarning, std::move(code), std::move(path), std::move(detail)});
  }

  bool fat32() const { return g_.variant == Variant::kFat32; }

  std::uint32_t entry(std::uint32_t c) const {
    if (!fat32()) return load_le16(fat_, c * 2ull);
    return load_le32(fat_, c * 4ull) & kFat32Mask;
  }
  bool eoc(std::uint32_t v) const { return fat32() ? v >= kFat32EndOfChain : v >= kFat16EndOfChain; }
  bool bad(std::uint32_t v) const { return fat32() ? v == 0x0FFFFFF7 : v == 0xFFF7; }

  void load_fats() {
    const std::size_t bytes = static_cast<std::size_t>(bpb_.sectors_per_fat) * kSectorSize;
    Bytes copy(bytes);
    for (std::uint8_t i = 0; i < bpb_.num_fats; ++i) {
      read_sectors(g_.first_fat_sector + static_cast<std::uint64_t>(i) * bpb_.sectors_per_fat,
                   bpb_.sectors_per_fat, copy);
      if (i == 0) {
        fat_ = copy;
        continue;
      }
      auto diff = std::mismatch(fat_.begin(), fat_.end(), copy.begin());
      if (diff.first != fat_.end()) {
        error("fat-mismatch", "", "copy " + std::to_string(i + 1) + " differs at FAT sector " +
                                      std::to_string((diff.first - fat_.begin()) / kSectorSize));
      }
    }
    if ((entry(0) & 0xFF) != bpb_.media) warning("media-mismatch", "", "FAT[0] disagrees with BPB media byte");
  }

  void read_sectors(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) {
    constexpr std::uint32_t kChunk = 128;
    for (std::uint32_t s = 0; s < count; s += kChunk) {
      std::uint32_t n = std::min(kChunk, count - s);
      dev_.read(lba + s, n, out.subspan(static_cast<std::size_t>(s) * kSectorSize,
                                       static_cast<std::size_t>(n) * kSectorSize));
    }
  }

  // Marks every cluster of the chain as owned by `path`; returns the chain
  // up to the first defect.
  std::vector<std::uint32_t> claim(std::uint32_t start, const std::string& path) {
    const int id = static_cast<int>(paths_.size());
    paths_.push_back(path);
    std::vector<std::uint32_t> chain;
    std::uint32_t c = start;
    while (true) {
      if (c < 2 || c > max_) {
        error("bad-cluster", path, "cluster " + std::to_string(c) + " out of range");
        break;
      }
      if (owner_[c] == id) {
        error("chain-loop", path, "cluster " + std::to_string(c) + " revisited");
        break;
      }
      if (owner_[c] != -1) {
        error("cross-link", path, "cluster " + std::to_string(c) + " also in " + paths_[owner_[c]]);
        break;
      }
      owner_[c] = id;
      chain.push_back(c);
      std::uint32_t next = entry(c);
      if (eoc(next)) break;
      if (next == 0) {
        error("chain-free", path, "cluster " + std::to_string(c) + " links to a free cluster");
        break;
      }
      if (bad(next)) {
        error("bad-cluster", path, "cluster " + std::to_string(c) + " links to a bad cluster");
        break;
      }
      c = next;
    }
    return chain;
  }

  struct Pending {
    std::uint32_t key;  // 0 for the root
    std::string path;
    std::uint32_t parent;
    std::vector<std::uint32_t> clusters;
  };

  void walk() {
    std::deque<Pending> queue;
    if (fat32()) {
      queue.push_back({0, "/", 0, claim(bpb_.root_cluster, "/")});
    } else {
      queue.push_back({0, "/", 0, {}});
    }
    while (!queue.empty()) {
      Pending dir = std::move(queue.front());
      queue.pop_front();
      Bytes data;
      if (dir.key == 0 && !fat32()) {
        data.resize(static_cast<std::size_t>(g_.root_dir_sectors) * kSectorSize);
        read_sectors(g_.first_root_dir_sector, g_.root_dir_sectors, data);
      } else {
        const std::size_t cb = g_.bytes_per_cluster;
        data.resize(dir.clusters.size() * cb);
        for (std::size_t i = 0; i < dir.clusters.size(); ++i) {
          dev_.read(g_.cluster_to_sector(dir.clusters[i]), bpb_.sectors_per_cluster,
                    MutableByteSpan(data.data() + i * cb, cb));
        }
      }
      scan(dir, data, queue);
    }
  }

  void scan(const Pending& dir, ByteSpan data, std::deque<Pending>& queue) {
    const std::size_t slots = data.size() / kDirEntrySize;
    std::set<std::string> seen;
    int lfn_next = 0;
    std::uint8_t lfn_sum = 0;
    std::u16string lfn_name;
    bool lfn_open = false;
    auto orphan = [&](const std::string& where) {
      if (lfn_open) warning("lfn-orphan", where, "long-name entries without a matching short entry");
      lfn_open = false;
    };
    const std::string prefix = dir.path == "/" ? "/" : dir.path + "/";

    for (std::size_t i = 0; i < slots; ++i) {
      ByteSpan raw = data.subspan(i * kDirEntrySize, kDirEntrySize);
      if (raw[0] == kEntryEnd) break;
      if (raw[0] == kEntryDeleted) {
        orphan(dir.path);
        continue;
      }
      if ((raw[11] & 0x3F) == attr::kLongName) {
        int ord = raw[0] & 0x1F;
        if (raw[0] & 0x40) {
          orphan(dir.path);
          lfn_open = true;
          lfn_next = ord;
          lfn_sum = raw[13];
          lfn_name.assign(static_cast<std::size_t>(ord) * 13, u'\0');
        } else if (!lfn_open || ord != lfn_next || raw[13] != lfn_sum) {
          orphan(dir.path);
          warning("lfn-orphan", dir.path, "out-of-sequence long-name entry");
          continue;
        }
        if (ord == 0) {
          lfn_open = false;
          continue;
        }
        for (std::size_t k = 0; k < 13; ++k) {
          lfn_name[(ord - 1) * 13 + k] = static_cast<char16_t>(load_le16(raw, kLfnOffsets[k]));
        }
        --lfn_next;
        continue;
      }

      DirEntry e = DirEntry::parse(raw);
      std::string name = e.short_display();
      if (lfn_open) {
        if (lfn_next != 0) {
          warning("lfn-orphan", prefix + name, "incomplete long-name chain");
        } else if (lfn_checksum(e.short_name) != lfn_sum) {
          error("lfn-checksum", prefix + name, "long name does not match its short entry");
        } else {
          auto end = lfn_name.find(u'\0');
          name = names::utf16_to_utf8(std::u16string_view(lfn_name).substr(0, end));
        }
        lfn_open = false;
      }

      const bool is_dot = e.short_name[0] == '.';
      if ((e.attributes & attr::kVolumeLabel) != 0 && !e.is_directory()) continue;
      if (dir.key != 0 && i < 2) {
        bool dot_ok = is_dot && e.is_directory() &&
                      e.first_cluster == (i == 0 ? dir.key : dir.parent) &&
                      e.short_display() == (i == 0 ? "." : "..");
        if (!dot_ok) error("dot-entry", dir.path, "bad '" + std::string(i == 0 ? "." : "..") + "' entry");
        if (is_dot) continue;
      }
      if (is_dot) {
        error("dot-entry", dir.path, "stray dot entry");
        continue;
      }

      std::string path = prefix + name;
      std::string folded;
      for (char c : name) folded.push_back(static_cast<char>((c >= 'a' && c <= 'z') ? c - 32 : c));
      if (!seen.insert(folded).second) error("duplicate-name", path, "name appears twice");

      if (e.is_directory()) {
        if (e.first_cluster < 2) {
          error("bad-cluster", path, "directory without cluster");
          continue;
        }
        if (e.size_bytes != 0) warning("dir-size", path, "directory with non-zero size");
        auto chain = claim(e.first_cluster, path);
        if (!chain.empty() && chain.front() == e.first_cluster) {
          queue.push_back({e.first_cluster, path, dir.key, std::move(chain)});
        }
        continue;
      }
      if (e.first_cluster == 0) {
        if (e.size_bytes != 0) {
          error("size-mismatch", path, "size " + std::to_string(e.size_bytes) + " without clusters");
        }
        continue;
      }
      auto chain = claim(e.first_cluster, path);
      std::uint64_t expected = (static_cast<std::uint64_t>(e.size_bytes) + g_.bytes_per_cluster - 1) /
                               g_.bytes_per_cluster;
      if (chain.size() != expected) {
        error("size-mismatch", path, "size " + std::to_string(e.size_bytes) + " needs " +
                                         std::to_string(expected) + " clusters, chain has " +
                                         std::to_string(chain.size()));
      }
    }
    orphan(dir.path);
  }

  void account() {
    std::uint32_t first_lost = 0;
    for (std::uint32_t c = 2; c <= max_; ++c) {
      std::uint32_t v = entry(c);
      if (owner_[c] != -1) {
        ++report_.clusters_in_use;
      } else if (v == 0) {
        ++report_.free_clusters;
      } else if (!bad(v)) {
        if (report_.lost_clusters++ == 0) first_lost = c;
      }
    }
    if (report_.lost_clusters > 0) {
      error("lost-clusters", "", std::to_string(report_.lost_clusters) +
                                     " allocated clusters unreachable, first " + std::to_string(first_lost));
    }
  }

  void check_fsinfo(ByteSpan boot) {
    if (!fat32()) return;
    if (bpb_.backup_boot_sector != 0 && bpb_.backup_boot_sector < bpb_.reserved_sectors) {
      Bytes backup(kSectorSize);
      dev_.read(bpb_.backup_boot_sector, 1, backup);
      if (!std::equal(backup.begin(), backup.end(), boot.begin())) {
        warning("backup-boot", "", "backup boot sector differs");
      }
    }
    if (bpb_.fsinfo_sector == 0 || bpb_.fsinfo_sector >= bpb_.reserved_sectors) return;
    Bytes info(kSectorSize);
    dev_.read(bpb_.fsinfo_sector, 1, info);
    if (load_le32(info, 0) != 0x41615252 || load_le32(info, 484) != 0x61417272 ||
        load_le32(info, 508) != 0xAA550000) {
      warning("fsinfo-signature", "", "FSInfo signatures invalid");
      return;
    }
    std::uint32_t hint = load_le32(info, 488);
    if (hint != 0xFFFFFFFF && hint != report_.free_clusters) {
      warning("fsinfo-free", "", "hint " + std::to_string(hint) + ", actual " +
                                     std::to_string(report_.free_clusters));
    }
  }

  blockdev::BlockDevice& dev_;
  BiosParameterBlock bpb_;
  Geometry g_;
  std::uint32_t max_ = 0;
  Bytes fat_;
  std::vector<int> owner_;
  std::vector<std::string> paths_;
  CheckReport report_;
};

}  // namespace

CheckReport check(blockdev::BlockDevice& dev) { return Checker(dev).run(); }

}  // namespace usbb::fat
