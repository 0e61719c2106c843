#include <doctest.h>

#include <filesystem>

#include "evq/checkpoint.hpp"
#include "evq/error.hpp"

namespace fs = std::filesystem;

namespace {

evq::Checkpoint sample(std::vector<std::size_t> widths = {6, 5, 4}) {
  const evq::EmbeddingNet net(std::move(widths), 3);
  const auto head = evq::ArcFaceHead::random(7, net.embedding_dim(), 4);
  evq::Provenance p;
  p.stage = "test";
  p.train_images = 12;
  return evq::make_checkpoint(net, &head, p);
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-identical") {
  const auto c = sample();
  const fs::path path = fs::temp_directory_path() / "evq_test_roundtrip.eqck";
  evq::save_checkpoint(c, path);
  const auto back = evq::load_checkpoint(path);
  CHECK(back.serialize() == c.serialize());
  CHECK(back.payload_digest() == c.payload_digest());
  CHECK(back.head_classes == 7);
  CHECK(back.provenance.train_images == 12);
  const auto net = evq::to_net(back, false);
  const auto orig = evq::to_net(c, false);
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const auto a = net.layers()[l].weight.data(), b = orig.layers()[l].weight.data();
    CHECK(std::vector<double>(a.begin(), a.end()) == std::vector<double>(b.begin(), b.end()));
  }
  fs::remove(path);
}

TEST_CASE("corrupt payload byte") {
  std::string bytes = sample().serialize();
  bytes[bytes.size() - 5] ^= 0x01;
  try {
    evq::parse_checkpoint(bytes);
    FAIL("expected a digest error");
  } catch (const evq::Error& e) {
    CHECK(e.kind() == evq::ErrorKind::kDigest);
  }
}

TEST_CASE("truncation and unknown version") {
  const std::string bytes = sample().serialize();
  CHECK_THROWS_AS(evq::parse_checkpoint(bytes.substr(0, bytes.size() - 9)), evq::Error);
  CHECK_THROWS_AS(evq::parse_checkpoint("EQCK9\n{}\n"), evq::Error);

  std::string bumped = bytes;
  const auto at = bumped.find("\"version\":");
  REQUIRE(at != std::string::npos);
  bumped.replace(at, 11, "\"version\":9");
  try {
    evq::parse_checkpoint(bumped);
    FAIL("expected a version error");
  } catch (const evq::Error& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}

TEST_CASE("different topology names the layer") {
  const auto c = sample({6, 5, 4});
  try {
    evq::require_topology(c, {6, 3, 4});
    FAIL("expected a shape error");
  } catch (const evq::Error& e) {
    CHECK(e.kind() == evq::ErrorKind::kCheckpoint);
    CHECK(std::string(e.what()).find("layer") != std::string::npos);
  }
  CHECK_NOTHROW(evq::require_topology(c, {6, 5, 4}));
}

TEST_CASE("missing file is an IO error") {
  try {
    evq::load_checkpoint("/nonexistent/evq.eqck");
    FAIL("expected an IO error");
  } catch (const evq::Error& e) {
    CHECK(e.kind() == evq::ErrorKind::kIo);
  }
}
