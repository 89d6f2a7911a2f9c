#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "usbb/blockdev.hpp"
#include "usbb/bytes.hpp"

namespace usbb::fat {

enum class Variant { kFat16, kFat32 };
std::string_view to_string(Variant variant);
std::optional<Variant> parse_variant(std::string_view text);

// Variant is decided by cluster count alone.
inline constexpr std::uint32_t kFat16MinClusters = 4085;
inline constexpr std::uint32_t kFat32MinClusters = 65525;
inline constexpr std::uint32_t kFat32MaxClusters = 0x0FFFFFF5;

inline constexpr std::uint32_t kFat16EndOfChain = 0xFFF8;
inline constexpr std::uint32_t kFat32EndOfChain = 0x0FFFFFF8;
inline constexpr std::uint32_t kFat32Mask = 0x0FFFFFFF;

inline constexpr std::size_t kDirEntrySize = 32;
inline constexpr std::uint8_t kEntryEnd = 0x00;
inline constexpr std::uint8_t kEntryDeleted = 0xE5;

namespace attr {
inline constexpr std::uint8_t kReadOnly = 0x01;
inline constexpr std::uint8_t kHidden = 0x02;
inline constexpr std::uint8_t kSystem = 0x04;
inline constexpr std::uint8_t kVolumeLabel = 0x08;
inline constexpr std::uint8_t kDirectory = 0x10;
inline constexpr std::uint8_t kArchive = 0x20;
inline constexpr std::uint8_t kLongName = 0x0F;
}  // namespace attr

/// Boot-sector fields as stored on disk (FAT16 and FAT32 layouts).
struct BiosParameterBlock {
  std::string oem_name = "MSWIN4.1";
  std::uint16_t bytes_per_sector = 512;
  std::uint8_t sectors_per_cluster = 1;
  std::uint16_t reserved_sectors = 1;
  std::uint8_t num_fats = 2;
  std::uint16_t root_entry_count = 0;
  std::uint32_t total_sectors = 0;
  std::uint8_t media = 0xF8;
  std::uint32_t sectors_per_fat = 0;
  std::uint32_t root_cluster = 0;     // FAT32 only
  std::uint16_t fsinfo_sector = 0;    // FAT32 only
  std::uint16_t backup_boot_sector = 0;
  std::uint32_t volume_id = 0;
  std::string volume_label = "NO NAME";  // up to 11 ASCII bytes, stored space-padded

  bool operator==(const BiosParameterBlock&) const = default;
};

/// Layout derived from a BPB.
struct Geometry {
  Variant variant = Variant::kFat16;
  std::uint32_t root_dir_sectors = 0;
  std::uint32_t first_fat_sector = 0;
  std::uint32_t first_root_dir_sector = 0;  // FAT16 fixed root region
  std::uint32_t first_data_sector = 0;
  std::uint32_t cluster_count = 0;
  std::uint32_t bytes_per_cluster = 0;

  std::uint64_t cluster_to_sector(std::uint32_t cluster) const;
};

// Parses sector 0 and validates it; throws kBadSignature,
// kUnsupportedVariant (FAT12, NTFS, exFAT) or kInconsistentBpb.
BiosParameterBlock parse_boot_sector(ByteSpan sector);
Geometry derive_geometry(const BiosParameterBlock& bpb);

/// Short-entry checksum binding LFN entries to their 8.3 entry.
std::uint8_t lfn_checksum(std::span<const std::uint8_t, 11> short_name);

struct DosDateTime {
  std::uint16_t date = 0x21;  // 1980-01-01
  std::uint16_t time = 0;
  std::uint8_t tenths = 0;
};
DosDateTime to_dos(std::chrono::system_clock::time_point tp);

struct DirEntry {
  std::array<std::uint8_t, 11> short_name{};
  std::uint8_t attributes = 0;
  std::uint8_t nt_reserved = 0;
  std::uint8_t create_tenths = 0;
  std::uint16_t create_time = 0;
  std::uint16_t create_date = 0;
  std::uint16_t access_date = 0;
  std::uint16_t modify_time = 0;
  std::uint16_t modify_date = 0;
  std::uint32_t first_cluster = 0;
  std::uint32_t size_bytes = 0;
  std::string long_name;  // UTF-8; empty when the entry has no LFN chain

  bool is_directory() const { return (attributes & attr::kDirectory) != 0; }
  std::string short_display() const;  // "NAME.EXT"
  std::string name() const;           // long name when present

  std::array<std::uint8_t, kDirEntrySize> serialize() const;
  static DirEntry parse(ByteSpan raw);

  bool operator==(const DirEntry&) const = default;
};

struct VolumeInfo {
  std::uint64_t total_bytes = 0;  // data area
  std::uint64_t free_bytes = 0;
  std::string label;
  Variant variant = Variant::kFat16;
  std::uint32_t bytes_per_cluster = 0;
  std::uint32_t cluster_count = 0;
  std::uint32_t free_clusters = 0;
};

using Clock = std::function<std::chrono::system_clock::time_point()>;

struct MkfsParams {
  std::uint8_t sectors_per_cluster = 0;  // 0 chooses a size-appropriate default
  std::string volume_label = "NO NAME";
  std::optional<std::uint32_t> volume_id;  // derived from the clock when unset
};

class Volume;
class FileWriter;
class FileReader;

std::shared_ptr<Volume> mkfs(std::shared_ptr<blockdev::BlockDevice> dev, Variant variant,
                             const MkfsParams& params = {}, Clock clock = {});
std::shared_ptr<Volume> mount(std::shared_ptr<blockdev::BlockDevice> dev, Clock clock = {});

// Cluster count mkfs would produce; nullopt when the layout does not fit.
std::optional<std::uint32_t> planned_cluster_count(std::uint64_t sectors, Variant variant,
                                                   std::uint8_t sectors_per_cluster);

/// A mounted FAT16/FAT32 volume over any 512-byte block device.
///
/// The FAT is held in memory and written to every FAT copy when a mutating
/// operation completes. Mutations are exclusive; reads may run concurrently
/// between them.
class Volume : public std::enable_shared_from_this<Volume> {
 public:
  Volume(const Volume&) = delete;
  Volume& operator=(const Volume&) = delete;

  Variant variant() const { return geometry_.variant; }
  const BiosParameterBlock& bpb() const { return bpb_; }
  const Geometry& geometry() const { return geometry_; }
  blockdev::BlockDevice& device() { return *dev_; }

  std::vector<DirEntry> list_dir(std::string_view path);
  DirEntry stat(std::string_view path);
  bool exists(std::string_view path);
  Bytes read_file(std::string_view path);
  DirEntry write_file(std::string_view path, ByteSpan data, bool overwrite = false);
  DirEntry create_dir(std::string_view path);
  void remove(std::string_view path);
  VolumeInfo info();

  std::unique_ptr<FileWriter> open_writer(std::string_view path, bool overwrite = false);
  std::unique_ptr<FileReader> open_reader(std::string_view path);

  std::uint32_t free_clusters() const;
  // Full FAT scan, independent of the tracked counter.
  std::uint32_t count_free_clusters() const;
  std::uint32_t fat_entry(std::uint32_t cluster) const;
  std::vector<std::uint32_t> chain(std::uint32_t start) const;
  std::uint32_t clusters_for(std::uint64_t bytes) const;

  void flush();

 private:
  friend std::shared_ptr<Volume> mount(std::shared_ptr<blockdev::BlockDevice>, Clock);
  friend class FileWriter;
  friend class FileReader;

  struct Record;
  struct Directory;

  Volume(std::shared_ptr<blockdev::BlockDevice> dev, Clock clock);
  void load();

  // FAT access on the in-memory table.
  std::uint32_t get(std::uint32_t cluster) const;
  void set(std::uint32_t cluster, std::uint32_t value);
  bool is_eoc(std::uint32_t value) const;
  std::uint32_t eoc() const;
  std::uint32_t allocate(std::uint32_t previous);
  void free_chain(std::uint32_t start);
  std::vector<std::uint32_t> chain_locked(std::uint32_t start) const;
  void commit_fat();
  void begin_txn();
  void rollback_txn();
  void end_txn();

  Directory load_dir(std::uint32_t first_cluster) const;
  void store_slots(Directory& dir, std::size_t first, std::size_t count);
  std::vector<Record> records(const Directory& dir) const;
  std::optional<Record> find(const Directory& dir, std::string_view name) const;
  // Resolves every component but the last; returns the parent directory's
  // first cluster (0 for the FAT16 root) and the final component.
  std::pair<std::uint32_t, std::string> resolve_parent(std::string_view path) const;
  std::uint32_t resolve_dir(std::string_view path) const;
  DirEntry lookup(std::string_view path) const;
  std::uint32_t root_cluster() const;
  std::size_t reserve_slots(Directory& dir, std::size_t count);
  DirEntry insert_entry(std::uint32_t dir_cluster, const std::string& name, std::uint8_t attributes,
                        std::uint32_t first_cluster, std::uint32_t size);
  void erase_entry(std::uint32_t dir_cluster, const Record& rec);
  void read_cluster_run(std::uint32_t cluster, std::uint32_t count, MutableByteSpan out) const;
  void write_cluster(std::uint32_t cluster, ByteSpan data);
  void zero_cluster(std::uint32_t cluster);
  void ensure_writable() const;
  std::chrono::system_clock::time_point now() const;

  std::shared_ptr<blockdev::BlockDevice> dev_;
  Clock clock_;
  BiosParameterBlock bpb_;
  Geometry geometry_;
  std::string label_;

  mutable std::shared_mutex mutex_;
  Bytes fat_;  // one FAT copy, raw on-disk bytes
  std::vector<bool> fat_dirty_;
  std::uint32_t free_clusters_ = 0;
  std::uint32_t next_free_ = 2;
  bool fsinfo_dirty_ = false;

  bool in_txn_ = false;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> journal_;
  std::uint32_t saved_free_ = 0;
  std::uint32_t saved_next_ = 0;
};

/// Streams a new file onto the volume. Clusters are allocated and written
/// as data arrives; the directory entry appears only on commit(). A writer
/// destroyed without commit() releases everything it allocated.
class FileWriter {
 public:
  ~FileWriter();
  FileWriter(const FileWriter&) = delete;
  FileWriter& operator=(const FileWriter&) = delete;

  void append(ByteSpan data);
  DirEntry commit();
  void abort();
  std::uint64_t bytes_written() const { return size_; }

 private:
  friend class Volume;
  FileWriter(std::shared_ptr<Volume> volume, std::uint32_t dir_cluster, std::string name,
             bool replace);
  void write_clusters(ByteSpan data);

  std::shared_ptr<Volume> volume_;
  std::uint32_t dir_cluster_;
  std::string name_;
  bool replace_;
  std::vector<std::uint32_t> clusters_;
  Bytes tail_;  // partial cluster not yet written
  std::uint64_t size_ = 0;
  bool done_ = false;
};

class FileReader {
 public:
  std::uint64_t size() const { return size_; }
  // Reads up to out.size() bytes at `offset`; returns the count read.
  std::size_t read(std::uint64_t offset, MutableByteSpan out);

 private:
  friend class Volume;
  FileReader(std::shared_ptr<Volume> volume, std::vector<std::uint32_t> clusters,
             std::uint64_t size);

  std::shared_ptr<Volume> volume_;
  std::vector<std::uint32_t> clusters_;
  std::uint64_t size_;
};

struct Finding {
  enum class Severity { kError, kWarning };
  Severity severity = Severity::kError;
  std::string code;
  std::string path;
  std::string detail;

  std::string format() const;  // "severity code path detail"
};

struct CheckReport {
  std::vector<Finding> findings;
  std::uint32_t cluster_count = 0;
  std::uint32_t clusters_in_use = 0;  // reachable from the directory tree
  std::uint32_t free_clusters = 0;
  std::uint32_t lost_clusters = 0;

  bool clean() const;  // no error-severity findings
  std::size_t errors() const;
};

// Read-only consistency check: FAT copies, chains (range, loops, free
// links, cross-links), size vs chain length, dot entries, LFN checksums,
// lost clusters and the FAT32 free-count hint.
CheckReport check(blockdev::BlockDevice& dev);

// Name helpers shared with the consistency checker.
namespace names {
bool valid_long_name(std::string_view name);
// True when `name` is storable as an 8.3 entry without a long name.
bool is_plain_short_name(std::string_view name);
std::array<std::uint8_t, 11> to_short_field(std::string_view plain_short_name);
// Basis name plus whether the conversion lost information.
std::pair<std::array<std::uint8_t, 11>, bool> basis_name(std::string_view long_name);
std::array<std::uint8_t, 11> with_numeric_tail(const std::array<std::uint8_t, 11>& basis,
                                                std::uint32_t n);
std::u16string utf8_to_utf16(std::string_view text);
std::string utf16_to_utf8(std::u16string_view text);
bool equal_ignore_case(std::string_view a, std::string_view b);
std::vector<std::string> split_path(std::string_view path);
}  // namespace names

}  // namespace usbb::fat
