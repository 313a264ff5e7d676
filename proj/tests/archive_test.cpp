#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "deanet/archive.hpp"

namespace deanet {
namespace {

WeightArchive random_archive(std::mt19937& rng, int tensors) {
    WeightArchive ar;
    std::uniform_real_distribution<float> dist{-10.0f, 10.0f};
    for (int i = 0; i < tensors; ++i) {
        const int ndim = 1 + int(rng() % 4);
        std::vector<std::uint32_t> dims(ndim);
        std::size_t numel = 1;
        for (auto& d : dims) {
            d = 1 + rng() % 5;
            numel *= d;
        }
        std::vector<float> data(numel);
        for (auto& v : data) v = dist(rng);
        ar.put("tensor." + std::to_string(i), std::move(dims), std::move(data));
    }
    return ar;
}

TEST(Archive, SaveLoadSaveIsByteIdentical) {
    std::mt19937 rng{307};
    auto ar = random_archive(rng, 12);
    const auto bytes1 = ar.serialize();
    auto back = WeightArchive::deserialize(bytes1);
    const auto bytes2 = back.serialize();
    EXPECT_EQ(bytes1, bytes2);
}

TEST(Archive, RoundTripIsBitExact) {
    std::mt19937 rng{311};
    auto ar = random_archive(rng, 8);
    auto back = WeightArchive::deserialize(ar.serialize());
    ASSERT_EQ(back.size(), ar.size());
    for (const auto& name : ar.names()) {
        const auto& a = ar.get(name);
        const auto& b = back.get(name);
        EXPECT_EQ(a.dims, b.dims);
        ASSERT_EQ(a.data.size(), b.data.size());
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            EXPECT_EQ(std::memcmp(&a.data[i], &b.data[i], 4), 0);
        }
    }
}

TEST(Archive, NamesComeBackSorted) {
    WeightArchive ar;
    ar.put("zeta", {1}, {1.0f});
    ar.put("alpha", {1}, {2.0f});
    ar.put("mid.10", {1}, {3.0f});
    ar.put("mid.2", {1}, {4.0f});
    const auto names = ar.names();
    ASSERT_EQ(names.size(), 4u);
    EXPECT_EQ(names[0], "alpha");
    EXPECT_EQ(names[1], "mid.10");  // byte order, not numeric
    EXPECT_EQ(names[2], "mid.2");
    EXPECT_EQ(names[3], "zeta");
}

TEST(Archive, CorruptMagicIsBadMagicError) {
    std::mt19937 rng{313};
    auto bytes = random_archive(rng, 2).serialize();
    bytes[0] = 'X';
    try {
        WeightArchive::deserialize(bytes);
        FAIL() << "expected BadMagic";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::BadMagic);
    }
}

TEST(Archive, WrongVersionIsBadVersionError) {
    std::mt19937 rng{317};
    auto bytes = random_archive(rng, 2).serialize();
    bytes[4] = 9;
    try {
        WeightArchive::deserialize(bytes);
        FAIL() << "expected BadVersion";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::BadVersion);
    }
}

TEST(Archive, TruncationIsTruncatedError) {
    std::mt19937 rng{331};
    auto bytes = random_archive(rng, 3).serialize();
    for (const std::size_t cut : {bytes.size() - 1, bytes.size() - 17, std::size_t(9)}) {
        std::vector<std::uint8_t> cut_bytes(bytes.begin(), bytes.begin() + cut);
        try {
            WeightArchive::deserialize(cut_bytes);
            FAIL() << "expected Truncated at " << cut;
        } catch (const ArchiveError& e) {
            EXPECT_EQ(e.code, ArchiveError::Code::Truncated);
        }
    }
}

TEST(Archive, TrailingBytesRejected) {
    std::mt19937 rng{337};
    auto bytes = random_archive(rng, 1).serialize();
    bytes.push_back(0);
    try {
        WeightArchive::deserialize(bytes);
        FAIL() << "expected TrailingData";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::TrailingData);
    }
}

TEST(Archive, DuplicateNameRejectedOnWrite) {
    WeightArchive ar;
    ar.put("a", {2}, {1.0f, 2.0f});
    try {
        ar.put("a", {1}, {3.0f});
        FAIL() << "expected DuplicateName";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::DuplicateName);
    }
}

TEST(Archive, DimOverflowRejected) {
    WeightArchive ar;
    try {
        ar.put("huge", {0xffffffffu, 0xffffffffu}, {});
        FAIL() << "expected DimOverflow";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::DimOverflow);
    }

    // crafted header with overflowing dims must not allocate
    WeightArchive small;
    small.put("t", {1}, {1.0f});
    auto bytes = small.serialize();
    // name "t": header(12) + u16 len + name(1) + dtype + ndim + dims(4) + payload
    const std::size_t ndim_pos = 12 + 2 + 1 + 1;
    bytes[ndim_pos] = 2;  // claim 2 dims
    // rewrite first dim to 2^31 and append another huge dim
    bytes[ndim_pos + 1] = 0;
    bytes[ndim_pos + 2] = 0;
    bytes[ndim_pos + 3] = 0;
    bytes[ndim_pos + 4] = 0x80;
    std::vector<std::uint8_t> crafted(bytes.begin(), bytes.begin() + ndim_pos + 5);
    crafted.insert(crafted.end(), {0xff, 0xff, 0xff, 0x7f});
    try {
        WeightArchive::deserialize(crafted);
        FAIL() << "expected DimOverflow";
    } catch (const ArchiveError& e) {
        EXPECT_EQ(e.code, ArchiveError::Code::DimOverflow);
    }
}

TEST(Archive, FileRoundTripThroughDisk) {
    std::mt19937 rng{347};
    auto ar = random_archive(rng, 5);
    const auto path = std::filesystem::temp_directory_path() / "deanet_archive_test.deaw";
    ar.save(path);
    auto back = WeightArchive::load(path);
    EXPECT_EQ(back.serialize(), ar.serialize());
    std::filesystem::remove(path);
}

}  // namespace
}  // namespace deanet
