#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "ffx/tensor.hpp"

namespace ffx {

// Ordered record of primitive applications on the current thread. Each entry
// owns a closure that reads its output's gradient and accumulates into the
// gradients of its inputs; replaying the entries in reverse order is a valid
// topological order because ops are recorded as they execute.
class Tape {
 public:
  static Tape& current();

  void record(const char* op, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Runs every recorded closure in reverse and empties the tape.
  void replay();

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

bool grad_enabled();

// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// True when an op over these inputs must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

// Seeds d(loss)/d(loss) = 1 and back-propagates through the tape.
// Throws ArgumentError for a non-scalar loss or one that does not require
// gradients.
void backward(Tensor loss);

}  // namespace ffx
