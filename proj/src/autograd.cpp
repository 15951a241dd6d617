#include "ffx/autograd.hpp"

#include "ffx/error.hpp"

namespace ffx {

namespace {
thread_local bool t_grad_enabled = true;
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const char* op, std::function<void()> backward) {
  nodes_.push_back(Node{op, std::move(backward)});
}

void Tape::replay() {
  // Move out first so closures cannot observe a half-cleared tape.
  std::vector<Node> nodes = std::move(nodes_);
  nodes_.clear();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void backward(Tensor loss) {
  if (loss.numel() != 1)
    throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ArgumentError("backward() on a loss that does not require gradients");
  loss.mutable_grad()[0] += real{1};
  Tape::current().replay();
}

}  // namespace ffx
